"""Shared domain types for the irregular-time-series representation pipeline.

Everything downstream (serialization, summarization, embedding, gridding,
training, evaluation) speaks in terms of these records. The unit of modeling
is a 48-hour window cut from one ICU stay; observations inside a window keep
their irregular timestamps and raw magnitudes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

WINDOW_HOURS = 48
LOOKAHEAD_HOURS = 24

FEATURE_KINDS = ("continuous", "binary")
PROMPT_KINDS = ("zero_shot", "cot", "icd", "trend")
SUMMARY_KINDS = PROMPT_KINDS + ("none",)  # "none" = raw serialization, no summary
SEXES = ("M", "F")


# ---------------------------------------------------------------------------
# Feature schema
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureSpec:
    """One named feature at one site.

    ``display`` overrides the rendered name in text serializations; when
    absent the serializer derives one from the camel-case name.
    """

    name: str
    kind: str  # "continuous" | "binary"
    unit: str = ""
    display: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in FEATURE_KINDS:
            raise ValueError(f"unknown feature kind {self.kind!r} for {self.name!r}")

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"name": self.name, "kind": self.kind, "unit": self.unit}
        if self.display is not None:
            d["display"] = self.display
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "FeatureSpec":
        return cls(
            name=d["name"],
            kind=d["kind"],
            unit=d.get("unit", ""),
            display=d.get("display"),
        )


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature dictionary for one site.

    Order is load-bearing: serializers emit features in schema order and grid
    tensors index rows by it.
    """

    site_id: str
    features: tuple[FeatureSpec, ...]

    def __post_init__(self) -> None:
        names = [f.name for f in self.features]
        if len(names) != len(set(names)):
            raise ValueError(f"duplicate feature names in schema for site {self.site_id!r}")

    def names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.features)

    def continuous_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.features if f.kind == "continuous")

    def binary_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.features if f.kind == "binary")

    def spec_of(self, name: str) -> FeatureSpec:
        for f in self.features:
            if f.name == name:
                return f
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(f.name == name for f in self.features)

    def to_dict(self) -> dict[str, Any]:
        return {
            "site_id": self.site_id,
            "features": [f.to_dict() for f in self.features],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "FeatureSchema":
        return cls(
            site_id=d["site_id"],
            features=tuple(FeatureSpec.from_dict(f) for f in d["features"]),
        )


# ---------------------------------------------------------------------------
# Grid tensor
# ---------------------------------------------------------------------------


def _frozen_array(a: np.ndarray, dtype=np.float64) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=dtype)
    if out is a:
        out = out.copy()
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class GridTensor:
    """Hourly D x T grid with an observation mask.

    ``mask`` holds exactly 0.0 or 1.0; cells with mask 0 carry value 0 until
    an imputation pass fills them. Arrays are frozen so a grid can be shared
    across threads and cached safely.
    """

    values: np.ndarray
    mask: np.ndarray
    feature_names: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", _frozen_array(self.values))
        object.__setattr__(self, "mask", _frozen_array(self.mask))
        if self.values.shape != self.mask.shape:
            raise ValueError(
                f"values shape {self.values.shape} != mask shape {self.mask.shape}"
            )
        if self.values.ndim != 2:
            raise ValueError(f"grid must be 2-D, got shape {self.values.shape}")
        if self.values.shape[0] != len(self.feature_names):
            raise ValueError(
                f"{self.values.shape[0]} rows but {len(self.feature_names)} feature names"
            )
        mask = self.mask
        if not np.all((mask == 0.0) | (mask == 1.0)):
            raise ValueError("mask cells must be exactly 0.0 or 1.0")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]

    def with_values(self, values: np.ndarray, mask: np.ndarray | None = None) -> "GridTensor":
        return GridTensor(
            values=values,
            mask=self.mask if mask is None else mask,
            feature_names=self.feature_names,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "feature_names": list(self.feature_names),
            "values": [[float(v) for v in row] for row in self.values],
            "mask": [[float(v) for v in row] for row in self.mask],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "GridTensor":
        return cls(
            values=np.asarray(d["values"], dtype=np.float64),
            mask=np.asarray(d["mask"], dtype=np.float64),
            feature_names=tuple(d["feature_names"]),
        )


# ---------------------------------------------------------------------------
# Labels and windows
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Demographics:
    age: float
    sex: str  # "M" | "F"

    def to_dict(self) -> dict[str, Any]:
        return {"age": float(self.age), "sex": self.sex}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Demographics":
        return cls(age=float(d["age"]), sex=d["sex"])


@dataclass(frozen=True)
class TaskLabels:
    """Targets derived for one window.

    ``los_remaining`` is in hours from window end to stay end. ``drug`` holds
    (vasopressor, antibiotic) flags for the 24 h after the window. ``labs``
    flags which of the designated lab tests get ordered in that interval, in
    ``lab_names`` order. ``forecast_target`` is the raw-unit hourly grid of
    the next 24 h.
    """

    mortality: bool
    los_remaining: float
    drug: tuple[bool, bool]
    labs: tuple[bool, ...]
    lab_names: tuple[str, ...]
    forecast_target: GridTensor | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "mortality": bool(self.mortality),
            "los_remaining": float(self.los_remaining),
            "drug": [bool(v) for v in self.drug],
            "labs": [bool(v) for v in self.labs],
            "lab_names": list(self.lab_names),
            "forecast_target": None
            if self.forecast_target is None
            else self.forecast_target.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TaskLabels":
        ft = d.get("forecast_target")
        return cls(
            mortality=bool(d["mortality"]),
            los_remaining=float(d["los_remaining"]),
            drug=tuple(bool(v) for v in d["drug"]),  # type: ignore[arg-type]
            labs=tuple(bool(v) for v in d["labs"]),
            lab_names=tuple(d["lab_names"]),
            forecast_target=None if ft is None else GridTensor.from_dict(ft),
        )


@dataclass(frozen=True)
class WindowRecord:
    """Irregular observations for one 48 h window of one stay.

    ``continuous_obs`` maps feature name to a time-sorted tuple of
    (hour, value) pairs with window-relative hours in [0, 48).
    ``binary_events`` maps feature name to a sorted tuple of integer hours.
    """

    stay_id: str
    site_id: str
    window_index: int
    continuous_obs: Mapping[str, tuple[tuple[float, float], ...]]
    binary_events: Mapping[str, tuple[int, ...]]
    demographics: Demographics
    labels: TaskLabels | None = None

    def n_observations(self) -> int:
        n = sum(len(v) for v in self.continuous_obs.values())
        n += sum(len(v) for v in self.binary_events.values())
        return n

    def to_dict(self) -> dict[str, Any]:
        return {
            "stay_id": self.stay_id,
            "site_id": self.site_id,
            "window_index": int(self.window_index),
            "continuous_obs": {
                k: [[float(h), float(v)] for h, v in obs]
                for k, obs in self.continuous_obs.items()
            },
            "binary_events": {k: [int(h) for h in hs] for k, hs in self.binary_events.items()},
            "demographics": self.demographics.to_dict(),
            "labels": None if self.labels is None else self.labels.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "WindowRecord":
        labels = d.get("labels")
        return cls(
            stay_id=d["stay_id"],
            site_id=d["site_id"],
            window_index=int(d["window_index"]),
            continuous_obs={
                k: tuple((float(h), float(v)) for h, v in obs)
                for k, obs in d["continuous_obs"].items()
            },
            binary_events={k: tuple(int(h) for h in hs) for k, hs in d["binary_events"].items()},
            demographics=Demographics.from_dict(d["demographics"]),
            labels=None if labels is None else TaskLabels.from_dict(labels),
        )


# ---------------------------------------------------------------------------
# Text and embedding records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Summary:
    """Text produced for one window: an LLM summary or the raw serialization.

    ``prompt_kind`` is one of zero_shot|cot|icd|trend, or "none" when the text
    is a serialization passed through without summarization.
    """

    stay_id: str
    window_index: int
    text: str
    prompt_kind: str
    backend_id: str
    token_count: int

    def __post_init__(self) -> None:
        if self.prompt_kind not in SUMMARY_KINDS:
            raise ValueError(f"unknown prompt kind {self.prompt_kind!r}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "stay_id": self.stay_id,
            "window_index": int(self.window_index),
            "text": self.text,
            "prompt_kind": self.prompt_kind,
            "backend_id": self.backend_id,
            "token_count": int(self.token_count),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Summary":
        return cls(
            stay_id=d["stay_id"],
            window_index=int(d["window_index"]),
            text=d["text"],
            prompt_kind=d["prompt_kind"],
            backend_id=d["backend_id"],
            token_count=int(d["token_count"]),
        )


@dataclass(frozen=True)
class EmbeddingVector:
    """Fixed-length representation of one window's text."""

    values: np.ndarray
    backend_id: str
    pooling: str
    normalize: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", _frozen_array(self.values))
        if self.values.ndim != 1:
            raise ValueError(f"embedding must be 1-D, got shape {self.values.shape}")

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


# ---------------------------------------------------------------------------
# Metric tables
# ---------------------------------------------------------------------------


@dataclass
class MetricTable:
    """Method x task table of scalar metric values.

    ``direction`` says per task whether lower or higher is better. Cells may
    be missing (a method that cannot run a task); consumers that need full
    coverage ask for ``complete_methods``.
    """

    methods: list[str] = field(default_factory=list)
    tasks: list[str] = field(default_factory=list)
    direction: dict[str, str] = field(default_factory=dict)  # task -> "lower"|"higher"
    cells: dict[tuple[str, str], float] = field(default_factory=dict)

    def set(self, method: str, task: str, value: float) -> None:
        if method not in self.methods:
            self.methods.append(method)
        if task not in self.tasks:
            self.tasks.append(task)
        self.cells[(method, task)] = float(value)

    def get(self, method: str, task: str) -> float | None:
        return self.cells.get((method, task))

    def has(self, method: str, task: str) -> bool:
        return (method, task) in self.cells

    def complete_methods(self, tasks: Sequence[str] | None = None) -> list[str]:
        """Methods holding a value for every task in ``tasks`` (default: all)."""
        wanted = list(tasks) if tasks is not None else list(self.tasks)
        return [m for m in self.methods if all((m, t) in self.cells for t in wanted)]

    def restricted(self, methods: Iterable[str]) -> "MetricTable":
        keep = list(methods)
        out = MetricTable(
            methods=keep,
            tasks=list(self.tasks),
            direction=dict(self.direction),
        )
        for (m, t), v in self.cells.items():
            if m in keep:
                out.cells[(m, t)] = v
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "methods": list(self.methods),
            "tasks": list(self.tasks),
            "direction": dict(self.direction),
            "cells": [
                {"method": m, "task": t, "value": v}
                for (m, t), v in sorted(self.cells.items())
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "MetricTable":
        table = cls(
            methods=list(d["methods"]),
            tasks=list(d["tasks"]),
            direction=dict(d["direction"]),
        )
        for cell in d["cells"]:
            table.cells[(cell["method"], cell["task"])] = float(cell["value"])
        return table


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def validate_window(window: WindowRecord, schema: FeatureSchema) -> list[str]:
    """Check a window against its site schema.

    Returns an empty list iff every type invariant holds and every feature
    name in the window appears in the schema. Each violation is one
    human-readable string naming the offending feature where possible.
    """
    violations: list[str] = []

    if window.window_index < 0:
        violations.append(f"window_index must be >= 0, got {window.window_index}")
    if window.demographics.sex not in SEXES:
        violations.append(f"unknown sex {window.demographics.sex!r}")
    if not math.isfinite(window.demographics.age):
        violations.append("age must be finite")

    for name, obs in window.continuous_obs.items():
        if name not in schema:
            violations.append(f"unknown feature {name}")
            continue
        if schema.spec_of(name).kind != "continuous":
            violations.append(f"{name}: binary feature carries continuous observations")
            continue
        prev = None
        for hour, value in obs:
            if not (0.0 <= hour < WINDOW_HOURS):
                violations.append(f"{name}: hour out of [0,48)")
            if prev is not None and hour < prev:
                violations.append(f"{name}: hours not sorted ascending")
            prev = hour
            if not math.isfinite(value):
                violations.append(f"{name}: non-finite value")

    for name, hours in window.binary_events.items():
        if name not in schema:
            violations.append(f"unknown feature {name}")
            continue
        if schema.spec_of(name).kind != "binary":
            violations.append(f"{name}: continuous feature carries binary events")
            continue
        prev_h = None
        for hour in hours:
            if not isinstance(hour, (int, np.integer)):
                violations.append(f"{name}: binary event hour must be an integer")
                continue
            if not (0 <= hour < WINDOW_HOURS):
                violations.append(f"{name}: hour out of [0,48)")
            if prev_h is not None and hour < prev_h:
                violations.append(f"{name}: hours not sorted ascending")
            prev_h = hour

    return violations
