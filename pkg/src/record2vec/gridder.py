"""Hourly grid discretization, imputation, and z-score normalization.

This is the numeric baseline path: windows become D x 48 grids (within-hour
mean), get completed by one of three imputation modes, and are z-scored with
statistics fit on the training split's observed cells only. The text path
never touches any of this; it consumes raw magnitudes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .core import FeatureSchema, GridTensor, WindowRecord, WINDOW_HOURS

IMPUTE_MODES = ("mean_fill", "right_shift", "linear")

STD_FLOOR = 1e-6


def grid_from_observations(
    continuous_obs: Mapping[str, Sequence[tuple[float, float]]],
    binary_events: Mapping[str, Sequence[int]],
    schema: FeatureSchema,
    t_hours: int,
    hour_offset: float = 0.0,
) -> GridTensor:
    """Bucket observations into an hourly D x t_hours grid.

    Continuous cells hold the mean of the observations falling in that hour;
    binary cells hold 1 at event hours. All other cells are (value 0, mask 0).
    ``hour_offset`` shifts the observation clock before bucketing, which is
    how lookahead grids reuse stay-relative observations.
    """
    names = schema.names()
    d = len(names)
    values = np.zeros((d, t_hours), dtype=np.float64)
    mask = np.zeros((d, t_hours), dtype=np.float64)
    counts = np.zeros((d, t_hours), dtype=np.float64)

    for row, spec in enumerate(schema.features):
        if spec.kind == "continuous":
            for hour, value in continuous_obs.get(spec.name, ()):
                col = math.floor(hour - hour_offset)
                if 0 <= col < t_hours:
                    values[row, col] += value
                    counts[row, col] += 1.0
        else:
            for hour in binary_events.get(spec.name, ()):
                col = int(hour - hour_offset)
                if 0 <= col < t_hours:
                    values[row, col] = 1.0
                    counts[row, col] = 1.0

    observed = counts > 0
    mask[observed] = 1.0
    values[observed] /= counts[observed]
    return GridTensor(values=values, mask=mask, feature_names=names)


def to_grid(window: WindowRecord, schema: FeatureSchema, t_hours: int = WINDOW_HOURS) -> GridTensor:
    """Discretize one window into its hourly grid."""
    return grid_from_observations(window.continuous_obs, window.binary_events, schema, t_hours)


# ---------------------------------------------------------------------------
# Normalization statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NormStats:
    """Per-feature mean and std over the training split's observed cells.

    Population std, floored at ``STD_FLOOR``. Features never observed in the
    training split get mean 0 and the floor std.
    """

    feature_names: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict[str, Any]:
        return {
            "feature_names": list(self.feature_names),
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "NormStats":
        return cls(
            feature_names=tuple(d["feature_names"]),
            mean=np.asarray(d["mean"], dtype=np.float64),
            std=np.asarray(d["std"], dtype=np.float64),
        )


def fit_norm_stats(grids: Iterable[GridTensor]) -> NormStats:
    """Fit per-feature stats over observed cells across all given grids.

    Pass training-split grids only; leaking validation or test cells into
    these statistics corrupts every downstream comparison.
    """
    total: np.ndarray | None = None
    total_sq: np.ndarray | None = None
    count: np.ndarray | None = None
    names: tuple[str, ...] | None = None

    for grid in grids:
        if names is None:
            names = grid.feature_names
            d = len(names)
            total = np.zeros(d)
            total_sq = np.zeros(d)
            count = np.zeros(d)
        elif grid.feature_names != names:
            raise ValueError("all grids must share one feature schema")
        observed = grid.mask == 1.0
        total += np.where(observed, grid.values, 0.0).sum(axis=1)
        total_sq += np.where(observed, grid.values**2, 0.0).sum(axis=1)
        count += observed.sum(axis=1)

    if names is None:
        raise ValueError("fit_norm_stats needs at least one grid")
    assert total is not None and total_sq is not None and count is not None

    seen = count > 0
    mean = np.zeros(len(names))
    mean[seen] = total[seen] / count[seen]
    var = np.zeros(len(names))
    var[seen] = total_sq[seen] / count[seen] - mean[seen] ** 2
    std = np.sqrt(np.maximum(var, 0.0))
    std = np.maximum(std, STD_FLOOR)
    return NormStats(feature_names=names, mean=mean, std=std)


# ---------------------------------------------------------------------------
# Imputation
# ---------------------------------------------------------------------------


def _check_stats(grid: GridTensor, stats: NormStats) -> None:
    if stats.feature_names != grid.feature_names:
        raise ValueError("norm stats were fit on a different feature schema")


def impute(grid: GridTensor, mode: str, stats: NormStats) -> GridTensor:
    """Complete a grid's missing cells. Returns a dense grid, mask unchanged.

    Modes:
      mean_fill   missing cells take the feature's training mean.
      right_shift last observation carried forward; cells before the first
                  observation take the training mean.
      linear      straight line between bracketing observations; flat beyond
                  the first/last observation.

    A row with no observations falls back to the training mean in all modes.
    """
    if mode not in IMPUTE_MODES:
        raise ValueError(f"unknown imputation mode {mode!r}")
    _check_stats(grid, stats)

    d, t = grid.shape
    observed = grid.mask == 1.0
    out = np.array(grid.values, dtype=np.float64)

    if mode == "mean_fill":
        fill = np.broadcast_to(stats.mean[:, None], (d, t))
        out = np.where(observed, out, fill)
    elif mode == "right_shift":
        # Index of the most recent observed column at or before each column.
        idx = np.where(observed, np.arange(t)[None, :], -1)
        idx = np.maximum.accumulate(idx, axis=1)
        has_prev = idx >= 0
        carried = np.take_along_axis(grid.values, np.maximum(idx, 0), axis=1)
        fill = np.broadcast_to(stats.mean[:, None], (d, t))
        out = np.where(has_prev, carried, fill)
    else:  # linear
        cols = np.arange(t, dtype=np.float64)
        for row in range(d):
            obs_cols = np.nonzero(observed[row])[0]
            if obs_cols.size == 0:
                out[row, :] = stats.mean[row]
            else:
                out[row, :] = np.interp(cols, obs_cols.astype(np.float64), grid.values[row, obs_cols])

    return grid.with_values(out)


def apply_norm(grid: GridTensor, stats: NormStats) -> GridTensor:
    """Z-score every cell with the per-feature training stats."""
    _check_stats(grid, stats)
    out = (grid.values - stats.mean[:, None]) / stats.std[:, None]
    return grid.with_values(out)
