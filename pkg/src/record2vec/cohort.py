"""Synthetic multi-site ICU cohorts, stay windowing, labels, and splits.

The generator is the test bed for the whole pipeline: every stay carries a
latent AR(1) severity path, continuous features are affine in severity plus
noise sampled at Poisson event times (then thinned), binary therapies fire
when severity crosses a per-feature threshold, and all labels link back to
severity. Two knobs create cross-site shift: feature renames and unit
rescales. Generation is bit-deterministic per (seed, site, stay).

Demographics stay statistically independent of observations unless
``leak_demographics`` is set, in which case designated features pick up a
strong additive sex offset and an age slope; the privacy probes exist to
detect exactly this.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .core import (
    Demographics,
    FeatureSchema,
    FeatureSpec,
    GridTensor,
    LOOKAHEAD_HOURS,
    TaskLabels,
    WINDOW_HOURS,
    WindowRecord,
)
from .gridder import grid_from_observations

# RNG stream tags so observation and label draws never interleave.
_STREAM_OBS = 0
_STREAM_LABEL = 1
_STREAM_SPLIT = 2


# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureGen:
    """Generator parameters for one feature in the shared menu.

    Continuous: value = (base + sev_coef * severity + noise_sd * N(0,1)),
    rounded to ``decimals``, sampled at Poisson(rate_per_hour) event times and
    thinned by ``missingness``. Binary: an event fires at integer hour h with
    probability ``fire_prob`` whenever severity(h) > ``threshold``.
    """

    name: str
    kind: str  # "continuous" | "binary"
    unit: str = ""
    group: str = "lab"  # "vital" | "lab" | "bin"
    base: float = 0.0
    sev_coef: float = 0.0
    noise_sd: float = 1.0
    rate_per_hour: float = 0.5
    missingness: float = 0.2
    decimals: int = 0
    threshold: float = 0.5
    fire_prob: float = 0.8
    display: str | None = None


@dataclass(frozen=True)
class SiteSpec:
    """Per-site heterogeneity over the shared feature menu."""

    site_id: str
    n_stays: int
    renames: Mapping[str, str] = field(default_factory=dict)
    unit_rescale: Mapping[str, float] = field(default_factory=dict)
    extra_features: tuple[FeatureGen, ...] = ()

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SiteSpec":
        return cls(
            site_id=d["site_id"],
            n_stays=int(d["n_stays"]),
            renames=dict(d.get("renames", {})),
            unit_rescale={k: float(v) for k, v in d.get("unit_rescale", {}).items()},
        )


@dataclass(frozen=True)
class CohortSpec:
    """Everything the generator needs for one multi-site cohort."""

    seed: int
    sites: tuple[SiteSpec, ...]
    features: tuple[FeatureGen, ...]
    lab_order_features: tuple[str, ...]
    drug_features: tuple[str, str]  # (vasopressor-like, antibiotic-like)
    mortality_rate: float = 0.3
    mortality_slope: float = 1.8
    severity_rho: float = 0.92
    severity_noise: float = 0.35
    duration_base: float = 100.0
    duration_sev_coef: float = 18.0
    duration_noise: float = 12.0
    duration_min: int = 73
    duration_max: int = 168
    leak_demographics: bool = False
    leak_sex_offsets: Mapping[str, float] = field(default_factory=dict)
    leak_age_slopes: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not (0.0 < self.mortality_rate < 1.0):
            raise ValueError(f"mortality_rate must be in (0,1), got {self.mortality_rate}")
        names = {f.name for f in self.features}
        for lab in self.lab_order_features:
            if lab not in names:
                raise ValueError(f"lab order target {lab!r} is not in the feature menu")
        for drug in self.drug_features:
            if drug not in names:
                raise ValueError(f"drug target {drug!r} is not in the feature menu")


@dataclass(frozen=True)
class LabelSpec:
    """Which features carry the drug and lab-order labels, by original name."""

    drug_features: tuple[str, str]
    lab_order_features: tuple[str, ...]


@dataclass(frozen=True)
class StayRecord:
    """One ICU admission with stay-relative observation hours in [0, duration)."""

    stay_id: str
    site_id: str
    duration_hours: int
    continuous_obs: Mapping[str, tuple[tuple[float, float], ...]]
    binary_events: Mapping[str, tuple[int, ...]]
    demographics: Demographics
    mortality: bool

    def to_dict(self) -> dict[str, Any]:
        return {
            "stay_id": self.stay_id,
            "site_id": self.site_id,
            "duration_hours": int(self.duration_hours),
            "continuous_obs": {
                k: [[float(h), float(v)] for h, v in obs]
                for k, obs in self.continuous_obs.items()
            },
            "binary_events": {k: [int(h) for h in hs] for k, hs in self.binary_events.items()},
            "demographics": self.demographics.to_dict(),
            "mortality": bool(self.mortality),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "StayRecord":
        return cls(
            stay_id=d["stay_id"],
            site_id=d["site_id"],
            duration_hours=int(d["duration_hours"]),
            continuous_obs={
                k: tuple((float(h), float(v)) for h, v in obs)
                for k, obs in d["continuous_obs"].items()
            },
            binary_events={k: tuple(int(h) for h in hs) for k, hs in d["binary_events"].items()},
            demographics=Demographics.from_dict(d["demographics"]),
            mortality=bool(d["mortality"]),
        )


@dataclass(frozen=True)
class SiteCohort:
    schema: FeatureSchema
    stays: tuple[StayRecord, ...]
    label_spec: LabelSpec


# ---------------------------------------------------------------------------
# Default feature menu
# ---------------------------------------------------------------------------


def default_feature_menu() -> tuple[FeatureGen, ...]:
    """Shared 18-feature menu: 4 vitals, 10 labs, 4 therapies."""
    return (
        FeatureGen("HeartRate", "continuous", "bpm", "vital", 85, 14, 6, 1.0, 0.2, 0),
        FeatureGen("MeanBloodPressure", "continuous", "mmHg", "vital", 78, -9, 7, 1.0, 0.2, 0),
        FeatureGen("RespiratoryRate", "continuous", "breaths/min", "vital", 17, 4, 3, 0.9, 0.25, 0),
        FeatureGen("Temperature", "continuous", "degC", "vital", 36.8, 0.5, 0.4, 0.35, 0.3, 1),
        FeatureGen("Lactate", "continuous", "mmol/L", "lab", 1.8, 1.4, 0.5, 0.25, 0.3, 1),
        FeatureGen("Creatinine", "continuous", "umol/L", "lab", 95, 30, 18, 0.2, 0.3, 0),
        FeatureGen("Hemoglobin", "continuous", "g/L", "lab", 112, -9, 9, 0.2, 0.3, 0),
        FeatureGen("Platelets", "continuous", "1e9/L", "lab", 220, -45, 40, 0.15, 0.3, 0),
        FeatureGen("Sodium", "continuous", "mmol/L", "lab", 139, 3, 3, 0.2, 0.3, 0),
        FeatureGen("Potassium", "continuous", "mmol/L", "lab", 4.1, 0.4, 0.35, 0.2, 0.3, 1),
        FeatureGen("Glucose", "continuous", "mmol/L", "lab", 7.5, 1.6, 1.4, 0.25, 0.3, 1),
        FeatureGen("WBC", "continuous", "1e9/L", "lab", 9.5, 3.2, 2.2, 0.18, 0.3, 1),
        FeatureGen("Bilirubin", "continuous", "umol/L", "lab", 14, 8, 6, 0.12, 0.35, 0),
        FeatureGen("Magnesium", "continuous", "mmol/L", "lab", 0.9, 0.1, 0.1, 0.12, 0.35, 2),
        FeatureGen("Vasopressors", "binary", "", "bin", threshold=0.6, fire_prob=0.85),
        FeatureGen("Antibiotics", "binary", "", "bin", threshold=0.2, fire_prob=0.7),
        FeatureGen("Ventilation", "binary", "", "bin", threshold=0.9, fire_prob=0.9),
        FeatureGen("Dialysis", "binary", "", "bin", threshold=1.5, fire_prob=0.8),
    )


DEFAULT_LAB_ORDER_FEATURES = (
    "Lactate",
    "Creatinine",
    "Hemoglobin",
    "Platelets",
    "Sodium",
    "Potassium",
    "Glucose",
    "WBC",
    "Bilirubin",
    "Magnesium",
)

DEFAULT_DRUG_FEATURES = ("Vasopressors", "Antibiotics")

# Each offset exceeds the feature's full severity-plus-noise swing, so the
# two sexes occupy disjoint value ranges and every summary sentence for these
# features carries sex-separable tokens. Deliberately extreme and clinically
# implausible: this is the positive control the probes must detect, not a
# realistic shift.
DEFAULT_LEAK_SEX_OFFSETS = {
    "HeartRate": 90.0,
    "MeanBloodPressure": 70.0,
    "RespiratoryRate": 40.0,
    "Temperature": 4.0,
    "Lactate": 12.0,
    "Creatinine": 220.0,
}

DEFAULT_LEAK_AGE_SLOPES = {
    "HeartRate": 0.15,
    "Creatinine": 0.8,
}


def default_cohort_spec(
    seed: int,
    sites: Sequence[SiteSpec],
    leak_demographics: bool = False,
    mortality_rate: float = 0.3,
) -> CohortSpec:
    return CohortSpec(
        seed=seed,
        sites=tuple(sites),
        features=default_feature_menu(),
        lab_order_features=DEFAULT_LAB_ORDER_FEATURES,
        drug_features=DEFAULT_DRUG_FEATURES,
        mortality_rate=mortality_rate,
        leak_demographics=leak_demographics,
        leak_sex_offsets=DEFAULT_LEAK_SEX_OFFSETS,
        leak_age_slopes=DEFAULT_LEAK_AGE_SLOPES,
    )


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def _site_schema(spec: CohortSpec, site: SiteSpec) -> FeatureSchema:
    entries: list[FeatureSpec] = []
    for gen in tuple(spec.features) + tuple(site.extra_features):
        name = site.renames.get(gen.name, gen.name)
        factor = site.unit_rescale.get(gen.name, 1.0)
        unit = gen.unit if factor == 1.0 else f"{gen.unit} (x{factor:g})"
        entries.append(FeatureSpec(name=name, kind=gen.kind, unit=unit, display=gen.display))
    return FeatureSchema(site_id=site.site_id, features=tuple(entries))


def _severity_path(rng: np.random.Generator, duration: int, spec: CohortSpec) -> np.ndarray:
    baseline = rng.normal(0.0, 1.0)
    deviations = np.empty(duration, dtype=np.float64)
    d = 0.0
    for t in range(duration):
        deviations[t] = d
        d = spec.severity_rho * d + spec.severity_noise * rng.normal(0.0, 1.0)
    return baseline + deviations


def _generate_stay(
    spec: CohortSpec,
    site: SiteSpec,
    site_idx: int,
    stay_idx: int,
) -> tuple[StayRecord, float]:
    """One stay and its mean severity (used later for label calibration)."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, site_idx, stay_idx, _STREAM_OBS]))

    age = float(rng.integers(18, 91))
    sex = "M" if rng.random() < 0.5 else "F"

    raw_duration = spec.duration_base + rng.normal(0.0, spec.duration_noise)

    # Draw the path on the maximum horizon so the realized duration does not
    # perturb the per-feature streams; then cut to the realized duration.
    severity_full = _severity_path(rng, spec.duration_max, spec)
    mean_sev_probe = float(np.mean(severity_full[: spec.duration_min]))
    duration = int(
        np.clip(
            round(raw_duration + spec.duration_sev_coef * mean_sev_probe),
            spec.duration_min,
            spec.duration_max,
        )
    )
    severity = severity_full[:duration]
    mean_severity = float(np.mean(severity))

    continuous_obs: dict[str, tuple[tuple[float, float], ...]] = {}
    binary_events: dict[str, tuple[int, ...]] = {}

    for gen in tuple(spec.features) + tuple(site.extra_features):
        name = site.renames.get(gen.name, gen.name)
        factor = site.unit_rescale.get(gen.name, 1.0)
        if gen.kind == "continuous":
            n_events = rng.poisson(gen.rate_per_hour * duration)
            if n_events == 0:
                continue
            hours = np.sort(rng.uniform(0.0, duration, size=n_events))
            keep = rng.random(n_events) >= gen.missingness
            obs: list[tuple[float, float]] = []
            for hour, kept in zip(hours, keep):
                noise = rng.normal(0.0, gen.noise_sd)
                if not kept:
                    continue
                value = gen.base + gen.sev_coef * severity[int(hour)] + noise
                if spec.leak_demographics:
                    if sex == "M":
                        value += spec.leak_sex_offsets.get(gen.name, 0.0)
                    value += spec.leak_age_slopes.get(gen.name, 0.0) * (age - 54.0)
                value *= factor
                obs.append((round(float(hour), 2), round(float(value), gen.decimals)))
            if obs:
                continuous_obs[name] = tuple(obs)
        else:
            fires = rng.random(duration)
            hours_fired = [
                h for h in range(duration) if severity[h] > gen.threshold and fires[h] < gen.fire_prob
            ]
            if hours_fired:
                binary_events[name] = tuple(hours_fired)

    stay = StayRecord(
        stay_id=f"{site.site_id}-{stay_idx:05d}",
        site_id=site.site_id,
        duration_hours=duration,
        continuous_obs=continuous_obs,
        binary_events=binary_events,
        demographics=Demographics(age=age, sex=sex),
        mortality=False,  # assigned in the calibrated label pass
    )
    return stay, mean_severity


def _calibrate_intercept(z: np.ndarray, slope: float, rate: float) -> float:
    """Bisect the logistic intercept so mean predicted risk hits ``rate``."""

    def mean_risk(a0: float) -> float:
        return float(np.mean(1.0 / (1.0 + np.exp(-(a0 + slope * z)))))

    lo, hi = -30.0, 30.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mean_risk(mid) < rate:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def generate_synthetic_cohort(spec: CohortSpec) -> dict[str, SiteCohort]:
    """Generate every site of the cohort. Bit-identical for a given spec."""
    out: dict[str, SiteCohort] = {}
    for site_idx, site in enumerate(spec.sites):
        schema = _site_schema(spec, site)
        stays: list[StayRecord] = []
        severities = np.empty(site.n_stays, dtype=np.float64)
        for stay_idx in range(site.n_stays):
            stay, mean_sev = _generate_stay(spec, site, site_idx, stay_idx)
            stays.append(stay)
            severities[stay_idx] = mean_sev

        intercept = _calibrate_intercept(severities, spec.mortality_slope, spec.mortality_rate)
        labeled: list[StayRecord] = []
        for stay_idx, stay in enumerate(stays):
            rng = np.random.default_rng(
                np.random.SeedSequence([spec.seed, site_idx, stay_idx, _STREAM_LABEL])
            )
            risk = 1.0 / (1.0 + math.exp(-(intercept + spec.mortality_slope * severities[stay_idx])))
            labeled.append(replace(stay, mortality=bool(rng.random() < risk)))

        vaso, abx = spec.drug_features
        site_label_spec = LabelSpec(
            drug_features=(site.renames.get(vaso, vaso), site.renames.get(abx, abx)),
            lab_order_features=tuple(site.renames.get(n, n) for n in spec.lab_order_features),
        )
        out[site.site_id] = SiteCohort(
            schema=schema, stays=tuple(labeled), label_spec=site_label_spec
        )
    return out


# ---------------------------------------------------------------------------
# Windowing and labels
# ---------------------------------------------------------------------------


def window_stay(stay: StayRecord, window_hours: int = WINDOW_HOURS) -> list[WindowRecord]:
    """Cut a stay into non-overlapping windows with full lookahead.

    A window [k*W, (k+1)*W) is kept only if the stay still covers the 24 h
    lookahead after it, so a 120 h stay yields 2 windows, 72 h yields 1, and
    71 h yields none.
    """
    n_windows = max(0, math.floor((stay.duration_hours - LOOKAHEAD_HOURS) / window_hours))
    windows: list[WindowRecord] = []
    for k in range(n_windows):
        start = k * window_hours
        end = start + window_hours
        cont = {}
        for name, obs in stay.continuous_obs.items():
            local = tuple((h - start, v) for h, v in obs if start <= h < end)
            if local:
                cont[name] = local
        events = {}
        for name, hours in stay.binary_events.items():
            local_h = tuple(h - start for h in hours if start <= h < end)
            if local_h:
                events[name] = local_h
        windows.append(
            WindowRecord(
                stay_id=stay.stay_id,
                site_id=stay.site_id,
                window_index=k,
                continuous_obs=cont,
                binary_events=events,
                demographics=stay.demographics,
                labels=None,
            )
        )
    return windows


def derive_labels(
    window: WindowRecord,
    stay: StayRecord,
    schema: FeatureSchema,
    label_spec: LabelSpec,
    window_hours: int = WINDOW_HOURS,
) -> TaskLabels:
    """Targets for one window, read off the full stay record.

    Drug and lab-order flags look at (end, end+24]; the forecast grid covers
    hours [end, end+24) in raw units with its own observation mask.
    """
    end = (window.window_index + 1) * window_hours
    horizon = end + LOOKAHEAD_HOURS
    if horizon > stay.duration_hours:
        raise ValueError(
            f"window {window.window_index} of stay {stay.stay_id} lacks a full lookahead"
        )

    vaso_name, abx_name = label_spec.drug_features
    drug = (
        any(end < h <= horizon for h in stay.binary_events.get(vaso_name, ())),
        any(end < h <= horizon for h in stay.binary_events.get(abx_name, ())),
    )
    labs = tuple(
        any(end < h <= horizon for h, _ in stay.continuous_obs.get(name, ()))
        for name in label_spec.lab_order_features
    )

    look_cont = {
        name: [(h, v) for h, v in obs if end <= h < horizon]
        for name, obs in stay.continuous_obs.items()
    }
    look_bin = {
        name: [h for h in hours if end <= h < horizon]
        for name, hours in stay.binary_events.items()
    }
    forecast = grid_from_observations(
        look_cont, look_bin, schema, LOOKAHEAD_HOURS, hour_offset=float(end)
    )

    return TaskLabels(
        mortality=stay.mortality,
        los_remaining=float(stay.duration_hours - end),
        drug=drug,
        labs=labs,
        lab_names=label_spec.lab_order_features,
        forecast_target=forecast,
    )


def windows_with_labels(
    cohort: SiteCohort, window_hours: int = WINDOW_HOURS
) -> list[WindowRecord]:
    """All labeled windows of a site, stay order then window order."""
    out: list[WindowRecord] = []
    for stay in cohort.stays:
        for window in window_stay(stay, window_hours):
            labels = derive_labels(window, stay, cohort.schema, cohort.label_spec, window_hours)
            out.append(replace(window, labels=labels))
    return out


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Splits:
    """Stay-level split; windows inherit their stay's assignment."""

    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def assignment(self) -> dict[str, str]:
        out = {sid: "train" for sid in self.train}
        out.update({sid: "val" for sid in self.val})
        out.update({sid: "test" for sid in self.test})
        return out

    def to_dict(self) -> dict[str, Any]:
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test)}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Splits":
        return cls(train=tuple(d["train"]), val=tuple(d["val"]), test=tuple(d["test"]))


def split_cohort(
    stays: Sequence[StayRecord] | Iterable[str],
    ratios: tuple[float, float, float] = (0.7, 0.15, 0.15),
    seed: int = 0,
) -> Splits:
    """Shuffle stays and split by floor(ratio * n); the remainder goes to train.

    Splitting is by stay, never by window, so windows of one admission can
    never straddle train and test.
    """
    ids = [s.stay_id if isinstance(s, StayRecord) else str(s) for s in stays]
    if len(ids) != len(set(ids)):
        raise ValueError("duplicate stay ids")
    if len(ids) < 3:
        raise ValueError(f"need at least 3 stays to split, got {len(ids)}")
    if not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError(f"split ratios must sum to 1, got {ratios}")

    rng = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_SPLIT]))
    order = list(ids)
    rng.shuffle(order)

    n = len(order)
    n_val = math.floor(ratios[1] * n)
    n_test = math.floor(ratios[2] * n)
    n_train = n - n_val - n_test  # floor(train ratio * n) plus the remainder
    return Splits(
        train=tuple(order[:n_train]),
        val=tuple(order[n_train : n_train + n_val]),
        test=tuple(order[n_train + n_val :]),
    )
