"""Grid path: discretization, normalization statistics, and imputation.

Imputation modes are checked against a per-row brute-force reference that
makes no attempt at vectorization, over hundreds of random sparse grids.
"""

from __future__ import annotations

import numpy as np
import pytest

from record2vec.core import FeatureSchema, FeatureSpec, GridTensor
from record2vec.gridder import (
    IMPUTE_MODES,
    NormStats,
    STD_FLOOR,
    apply_norm,
    fit_norm_stats,
    grid_from_observations,
    impute,
    to_grid,
)


def random_grid(rng, d, t):
    values = np.round(rng.normal(50.0, 20.0, size=(d, t)), 2)
    mask = (rng.random((d, t)) < 0.35).astype(np.float64)
    values = values * mask
    names = tuple(f"f{i}" for i in range(d))
    return GridTensor(values=values, mask=mask, feature_names=names)


def stats_for(grid, rng):
    mean = np.round(rng.normal(50.0, 10.0, size=len(grid.feature_names)), 2)
    std = np.abs(rng.normal(10.0, 3.0, size=len(grid.feature_names))) + 0.5
    return NormStats(feature_names=grid.feature_names, mean=mean, std=std)


# ---------------------------------------------------------------------------
# Brute-force imputation references
# ---------------------------------------------------------------------------


def brute_impute_row(values, mask, mode, mean):
    t = len(values)
    obs = [c for c in range(t) for _ in range(1) if mask[c] == 1.0]
    out = [0.0] * t
    for c in range(t):
        if mask[c] == 1.0:
            out[c] = values[c]
        elif mode == "mean_fill":
            out[c] = mean
        elif mode == "right_shift":
            prev = [o for o in obs if o < c]
            out[c] = values[prev[-1]] if prev else mean
        else:  # linear
            if not obs:
                out[c] = mean
            else:
                prev = [o for o in obs if o < c]
                nxt = [o for o in obs if o > c]
                if prev and nxt:
                    lo, hi = prev[-1], nxt[0]
                    frac = (c - lo) / (hi - lo)
                    out[c] = values[lo] + frac * (values[hi] - values[lo])
                elif prev:
                    out[c] = values[prev[-1]]
                else:
                    out[c] = values[nxt[0]]
    if mode == "right_shift" and not obs:
        out = [mean] * t
    return np.array(out)


@pytest.mark.parametrize("mode", IMPUTE_MODES)
def test_impute_matches_brute_force(mode):
    rng = np.random.default_rng(31)
    for trial in range(200):
        d = int(rng.integers(1, 6))
        grid = random_grid(rng, d, 48)
        stats = stats_for(grid, rng)
        dense = impute(grid, mode, stats)
        for row in range(d):
            expected = brute_impute_row(
                grid.values[row], grid.mask[row], mode, stats.mean[row]
            )
            np.testing.assert_allclose(dense.values[row], expected, atol=1e-12, rtol=0)
        # imputation never rewrites the mask
        np.testing.assert_array_equal(dense.mask, grid.mask)


@pytest.mark.parametrize("mode", IMPUTE_MODES)
def test_all_missing_row_falls_back_to_training_mean(mode):
    grid = GridTensor(
        values=np.zeros((2, 48)),
        mask=np.vstack([np.zeros(48), np.ones(48)]),
        feature_names=("empty", "full"),
    )
    stats = NormStats(("empty", "full"), mean=np.array([7.5, 0.0]), std=np.array([1.0, 1.0]))
    dense = impute(grid, mode, stats)
    np.testing.assert_array_equal(dense.values[0], np.full(48, 7.5))


def test_impute_rejects_unknown_mode_and_foreign_stats():
    rng = np.random.default_rng(0)
    grid = random_grid(rng, 2, 48)
    stats = stats_for(grid, rng)
    with pytest.raises(ValueError, match="unknown imputation mode"):
        impute(grid, "zero_fill", stats)
    other = NormStats(("a", "b"), mean=np.zeros(2), std=np.ones(2))
    with pytest.raises(ValueError, match="different feature schema"):
        impute(grid, "mean_fill", other)


# ---------------------------------------------------------------------------
# Normalization statistics
# ---------------------------------------------------------------------------


def test_fit_norm_stats_uses_observed_cells_only():
    # unobserved cells carry value 0; including them would drag means to 0
    values = np.array([[10.0, 0.0, 30.0, 0.0]])
    mask = np.array([[1.0, 0.0, 1.0, 0.0]])
    grid = GridTensor(values=values, mask=mask, feature_names=("x",))
    stats = fit_norm_stats([grid])
    assert stats.mean[0] == pytest.approx(20.0)
    assert stats.std[0] == pytest.approx(10.0)  # population std of {10, 30}


def test_fit_norm_stats_matches_numpy_across_grids():
    rng = np.random.default_rng(5)
    grids = [random_grid(rng, 3, 48) for _ in range(7)]
    stats = fit_norm_stats(grids)
    for row in range(3):
        cells = np.concatenate([g.values[row][g.mask[row] == 1.0] for g in grids])
        np.testing.assert_allclose(stats.mean[row], cells.mean(), atol=1e-9)
        np.testing.assert_allclose(stats.std[row], max(cells.std(), STD_FLOOR), atol=1e-9)


def test_fit_norm_stats_floors_std_and_handles_unseen():
    constant = GridTensor(
        values=np.full((2, 4), 3.0) * np.array([[1.0], [0.0]]),
        mask=np.vstack([np.ones(4), np.zeros(4)]),
        feature_names=("const", "never"),
    )
    stats = fit_norm_stats([constant])
    assert stats.mean[0] == pytest.approx(3.0)
    assert stats.std[0] == STD_FLOOR
    assert stats.mean[1] == 0.0
    assert stats.std[1] == STD_FLOOR


def test_fit_norm_stats_error_cases():
    with pytest.raises(ValueError, match="at least one grid"):
        fit_norm_stats([])
    rng = np.random.default_rng(1)
    a = random_grid(rng, 2, 8)
    b = GridTensor(values=np.zeros((2, 8)), mask=np.zeros((2, 8)), feature_names=("p", "q"))
    with pytest.raises(ValueError, match="share one feature schema"):
        fit_norm_stats([a, b])


def test_norm_stats_round_trip():
    stats = NormStats(("a", "b"), mean=np.array([1.5, -2.0]), std=np.array([0.5, 3.0]))
    back = NormStats.from_dict(stats.to_dict())
    assert back.feature_names == stats.feature_names
    np.testing.assert_array_equal(back.mean, stats.mean)
    np.testing.assert_array_equal(back.std, stats.std)


def test_apply_norm_zscores_every_cell():
    grid = GridTensor(
        values=np.array([[2.0, 4.0], [10.0, 0.0]]),
        mask=np.array([[1.0, 0.0], [1.0, 1.0]]),
        feature_names=("a", "b"),
    )
    stats = NormStats(("a", "b"), mean=np.array([2.0, 5.0]), std=np.array([2.0, 5.0]))
    z = apply_norm(grid, stats)
    np.testing.assert_allclose(z.values, [[0.0, 1.0], [1.0, -1.0]])
    np.testing.assert_array_equal(z.mask, grid.mask)


# ---------------------------------------------------------------------------
# Discretization
# ---------------------------------------------------------------------------


def test_grid_from_observations_buckets_and_averages():
    schema = FeatureSchema(
        site_id="s",
        features=(FeatureSpec("HeartRate", "continuous"), FeatureSpec("Vaso", "binary")),
    )
    grid = grid_from_observations(
        {"HeartRate": [(1.2, 80.0), (1.8, 90.0), (5.0, 100.0)]},
        {"Vaso": [3, 3, 7]},
        schema,
        t_hours=8,
    )
    assert grid.values[0, 1] == pytest.approx(85.0)  # two obs in hour 1 averaged
    assert grid.mask[0, 1] == 1.0
    assert grid.values[0, 5] == pytest.approx(100.0)
    assert grid.mask[0, 2] == 0.0 and grid.values[0, 2] == 0.0
    assert grid.values[1, 3] == 1.0 and grid.values[1, 7] == 1.0
    assert grid.mask[1].sum() == 2.0


def test_grid_hour_offset_rebases_lookahead():
    schema = FeatureSchema(site_id="s", features=(FeatureSpec("Lactate", "continuous"),))
    grid = grid_from_observations(
        {"Lactate": [(48.5, 2.0), (50.2, 3.0), (47.9, 9.0)]}, {}, schema, t_hours=24, hour_offset=48.0
    )
    assert grid.values[0, 0] == pytest.approx(2.0)
    assert grid.values[0, 2] == pytest.approx(3.0)
    # observation before the offset window is dropped, not wrapped
    assert grid.mask[0].sum() == 2.0


def test_to_grid_defaults_to_window_hours(tiny_run):
    # smoke: any pipeline-generated window grids into D x 48
    import json

    from record2vec.core import FeatureSchema
    from record2vec.pipeline import load_windows

    cfg, paths = tiny_run
    site = cfg["cohort"]["sites"][0]["site_id"]
    schema = FeatureSchema.from_dict(json.loads(paths.schema(site).read_text())["schema"])
    window = load_windows(paths, site)[0]
    grid = to_grid(window, schema)
    assert grid.shape == (len(schema.names()), 48)
    assert set(np.unique(grid.mask)) <= {0.0, 1.0}
