"""Stage orchestration: configs, artifact wiring, and the experiment protocols.

A run directory holds the artifacts of one configuration, and a configuration
carries exactly one representation arm (summarize-then-embed, a no-summary or
template control, or one grid-imputation mode). Stages consume the artifacts
of earlier stages in the same directory, verify that those artifacts were
produced under the same config digest, and write their own outputs
atomically. Reruns are byte-identical; remote backends go through the disk
cache so even network stages replay deterministically.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import artifacts
from .artifacts import (
    atomic_write_text,
    canonical_json,
    config_digest,
    flatten_grid,
    read_jsonl,
    read_matrix,
    stage_seed,
    unflatten_grid,
    write_checkpoint,
    write_jsonl,
    write_matrix,
    read_checkpoint,
)
from .cohort import (
    CohortSpec,
    SiteSpec,
    Splits,
    default_feature_menu,
    DEFAULT_DRUG_FEATURES,
    DEFAULT_LAB_ORDER_FEATURES,
    DEFAULT_LEAK_AGE_SLOPES,
    DEFAULT_LEAK_SEX_OFFSETS,
    generate_synthetic_cohort,
    split_cohort,
    windows_with_labels,
)
from .core import (
    FeatureSchema,
    GridTensor,
    Summary,
    WINDOW_HOURS,
    WindowRecord,
)
from .embed import EmbedConfig, MockEmbedder, RemoteEmbedder, embed_texts
from .evalkit import auprc, auroc, mae, masked_mse, micro_prf, privacy_probe
from .gridder import NormStats, apply_norm, fit_norm_stats, impute, to_grid
from .learn import (
    Head,
    TrainCfg,
    fewshot_finetune,
    init_head,
    predict,
    train,
)
from .summarize import (
    MockSummarizer,
    RemoteSummarizer,
    SummaryCache,
    default_cache_dir,
    summarize_windows,
)
from .textize import count_tokens, serialize_canonical, serialize_template

STAGES = (
    "synth",
    "serialize",
    "summarize",
    "embed",
    "grid",
    "train",
    "eval",
    "transfer",
    "fewshot",
    "privacy",
    "tokens",
    "ranks",
    "report",
)

SUMMARY_ARMS = ("record2vec", "no_summary", "template")
GRID_ARMS = ("grid:mean_fill", "grid:right_shift", "grid:linear")
ARM_ALIASES = {"grid:mean": "grid:mean_fill", "grid:locf": "grid:right_shift"}

TASKS = ("forecast", "los", "mortality", "drug", "lab")
TASK_DISPLAY = {
    "forecast": "Forecast",
    "los": "LoS",
    "mortality": "Mort",
    "drug": "Drug",
    "lab": "Lab",
}
TASK_DIRECTION = {
    "forecast": "lower",
    "los": "lower",
    "mortality": "higher",
    "drug": "higher",
    "lab": "higher",
}
TASK_METRIC = {
    "forecast": "MSE",
    "los": "MAE",
    "mortality": "AUROC",
    "drug": "Recall",
    "lab": "Recall",
}

STD_FLOOR = 1e-6


class ValidationError(Exception):
    """Bad configuration or missing/incompatible upstream artifacts."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def default_config() -> dict[str, Any]:
    return {
        "seed": 7,
        "arm": "record2vec",
        "cohort": {
            "n_stays": 250,
            "mortality_rate": 0.3,
            "mortality_slope": 1.8,
            "leak_demographics": False,
            "duration_base": 120.0,
            "duration_noise": 12.0,
            "duration_min": 73,
            "duration_max": 168,
            "split": [0.7, 0.15, 0.15],
            "sites": [
                {"site_id": "site_a", "renames": {}, "unit_rescale": {}},
                {"site_id": "site_b", "renames": {}, "unit_rescale": {}},
            ],
        },
        "summarize": {
            "prompt_kind": "zero_shot",
            "backend": "mock",
            "url": "",
            "model": "",
            "temperature": 0.0,
            "max_tokens": 512,
            "max_workers": 1,
        },
        "embed": {
            "backend": "mock",
            "dim": 256,
            "pooling": "mean",
            "normalize": "l2",
            "salt": "r2v",
            "url": "",
            "model": "",
            "batch_size": 32,
        },
        "train": {
            "site": "site_a",
            "head": "mlp",
            "hidden": [256],
            "lr": 1e-3,
            "weight_decay": 0.01,
            "batch_size": 64,
            "max_epochs": 200,
            "patience": 10,
            "seeds": [42],
            "tasks": list(TASKS),
        },
        "transfer": {"pairs": [["site_a", "site_b"]]},
        "fewshot": {
            "shots": 16,
            "seeds": [42, 84, 1005, 2025],
            "task": "mortality",
            "pair": ["site_a", "site_b"],
        },
        "privacy": {"site": "site_a", "seeds": [42, 84, 1005, 2025]},
        "ranks": {
            "tables": [
                "indist_benchmark",
                "transfer_benchmark",
                "prompt_indist",
                "prompt_transfer",
                "summarizer_indist",
                "summarizer_transfer",
            ]
        },
        "report": {"runs": [], "include_fixtures": True},
    }


def _deep_merge(base: dict[str, Any], override: Mapping[str, Any]) -> dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key in out and isinstance(out[key], dict) and isinstance(value, Mapping):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | Path | None) -> dict[str, Any]:
    """Config file merged over defaults; a missing path means pure defaults."""
    cfg = default_config()
    if path is None:
        return cfg
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ValidationError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise ValidationError(f"config file {path} must hold a JSON object")
    return _deep_merge(cfg, raw)


def _parse_set_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict[str, Any], sets: Sequence[str], seed: int | None) -> dict[str, Any]:
    out = copy.deepcopy(cfg)
    for item in sets:
        if "=" not in item:
            raise ValidationError(f"--set needs key=value, got {item!r}")
        dotted, _, raw = item.partition("=")
        node = out
        parts = dotted.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                node[part] = {}
            node = node[part]
        node[parts[-1]] = _parse_set_value(raw)
    if seed is not None:
        out["seed"] = int(seed)
    return out


def normalize_arm(arm: str) -> str:
    arm = ARM_ALIASES.get(arm, arm)
    if arm not in SUMMARY_ARMS + GRID_ARMS:
        raise ValidationError(
            f"unknown representation arm {arm!r}; choose from "
            f"{', '.join(SUMMARY_ARMS + GRID_ARMS)}"
        )
    return arm


def validate_config(cfg: Mapping[str, Any]) -> dict[str, Any]:
    out = copy.deepcopy(dict(cfg))
    out["arm"] = normalize_arm(out.get("arm", "record2vec"))
    if not isinstance(out.get("seed"), int):
        raise ValidationError("seed must be an integer")
    sites = out["cohort"].get("sites", [])
    if not sites:
        raise ValidationError("cohort.sites must list at least one site")
    ids = [s["site_id"] for s in sites]
    if len(ids) != len(set(ids)):
        raise ValidationError("duplicate site_id in cohort.sites")
    for task in out["train"].get("tasks", []):
        if task not in TASKS:
            raise ValidationError(f"unknown task {task!r}; choose from {TASKS}")
    ratios = out["cohort"].get("split", [0.7, 0.15, 0.15])
    if len(ratios) != 3 or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValidationError(f"cohort.split must be three ratios summing to 1, got {ratios}")
    return out


def run_digest(cfg: Mapping[str, Any]) -> str:
    """Digest of the config sections that shape artifact content.

    The ``report`` and ``ranks`` sections only select what existing artifacts
    to aggregate, so changing them must not invalidate a run directory.
    """
    return config_digest({k: v for k, v in cfg.items() if k not in ("report", "ranks")})


def experiment_digest(cfg: Mapping[str, Any]) -> str:
    """Digest of the parts that must match for runs to be comparable."""
    return config_digest({"seed": cfg["seed"], "cohort": cfg["cohort"]})


# ---------------------------------------------------------------------------
# Run directory layout
# ---------------------------------------------------------------------------


class RunPaths:
    def __init__(self, out_dir: str | Path):
        self.root = Path(out_dir)

    def config(self) -> Path:
        return self.root / "run_config.json"

    def schema(self, site: str) -> Path:
        return self.root / "cohort" / f"schema_{site}.json"

    def stays(self, site: str) -> Path:
        return self.root / "cohort" / f"stays_{site}.jsonl"

    def windows(self, site: str) -> Path:
        return self.root / "cohort" / f"windows_{site}.jsonl"

    def splits(self) -> Path:
        return self.root / "cohort" / "splits.json"

    def cohort_summary(self) -> Path:
        return self.root / "cohort" / "summary.json"

    def texts(self, site: str) -> Path:
        return self.root / f"texts_{site}.jsonl"

    def summaries(self, site: str) -> Path:
        return self.root / f"summaries_{site}.jsonl"

    def embeddings(self, site: str) -> Path:
        return self.root / f"embeddings_{site}.r2ve"

    def grids(self, site: str) -> Path:
        return self.root / f"grids_{site}.r2vg"

    def grid_stats(self, site: str) -> Path:
        return self.root / f"grid_stats_{site}.json"

    def head(self, task: str, seed: int) -> Path:
        return self.root / "heads" / f"{task}_seed{seed}.r2vh"

    def train_history(self) -> Path:
        return self.root / "heads" / "train_history.jsonl"

    def train_meta(self) -> Path:
        return self.root / "heads" / "train_meta.json"

    def metrics_indist(self) -> Path:
        return self.root / "metrics_indist.json"

    def metrics_transfer(self) -> Path:
        return self.root / "metrics_transfer.json"

    def fewshot(self) -> Path:
        return self.root / "fewshot.json"

    def privacy(self) -> Path:
        return self.root / "privacy.json"

    def token_stats(self) -> Path:
        return self.root / "token_stats.json"

    def ranks_csv(self) -> Path:
        return self.root / "ranks.csv"

    def ranks_figure(self, table: str) -> Path:
        return self.root / f"ranks_{table}.png"

    def wins(self) -> Path:
        return self.root / "wins.json"

    def report_json(self) -> Path:
        return self.root / "report.json"

    def report_text(self) -> Path:
        return self.root / "report.txt"

    def report_csv(self) -> Path:
        return self.root / "report.csv"

    def report_meta(self) -> Path:
        return self.root / "report.meta.json"

    def figures_dir(self) -> Path:
        return self.root / "figures"


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise ValidationError(f"missing {path}; run `r2v {producer}` first")
    return path


def _check_digest(found: str | None, expected: str, what: str, force: bool) -> None:
    if found != expected and not force:
        raise ValidationError(
            f"{what} was produced under config digest {found}, current digest is "
            f"{expected}; rerun upstream stages or pass --force"
        )


def write_run_config(cfg: Mapping[str, Any], out: RunPaths, force: bool) -> str:
    digest = run_digest(cfg)
    doc = {"config": dict(cfg), "config_digest": digest, "experiment_digest": experiment_digest(cfg)}
    path = out.config()
    if path.exists():
        try:
            existing = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            existing = {}
        _check_digest(existing.get("config_digest"), digest, str(path), force)
    atomic_write_text(path, canonical_json(doc) + "\n")
    return digest


def _write_json(path: Path, payload: Mapping[str, Any], kind: str, digest: str) -> None:
    doc = {"kind": kind, "version": artifacts.FORMAT_VERSION, "config_digest": digest}
    doc.update(payload)
    atomic_write_text(path, canonical_json(doc) + "\n")


def _read_json(path: Path, kind: str, producer: str) -> dict[str, Any]:
    _require(path, producer)
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("kind") != kind:
        raise ValidationError(f"{path}: expected kind {kind!r}, found {doc.get('kind')!r}")
    return doc


# ---------------------------------------------------------------------------
# Cohort assembly
# ---------------------------------------------------------------------------


def build_cohort_spec(cfg: Mapping[str, Any]) -> CohortSpec:
    c = cfg["cohort"]
    sites = tuple(
        SiteSpec(
            site_id=s["site_id"],
            n_stays=int(s.get("n_stays", c["n_stays"])),
            renames=dict(s.get("renames", {})),
            unit_rescale={k: float(v) for k, v in s.get("unit_rescale", {}).items()},
        )
        for s in c["sites"]
    )
    return CohortSpec(
        seed=stage_seed(cfg["seed"], "synth"),
        sites=sites,
        features=default_feature_menu(),
        lab_order_features=DEFAULT_LAB_ORDER_FEATURES,
        drug_features=DEFAULT_DRUG_FEATURES,
        mortality_rate=float(c["mortality_rate"]),
        mortality_slope=float(c["mortality_slope"]),
        duration_base=float(c["duration_base"]),
        duration_noise=float(c["duration_noise"]),
        duration_min=int(c["duration_min"]),
        duration_max=int(c["duration_max"]),
        leak_demographics=bool(c["leak_demographics"]),
        leak_sex_offsets=DEFAULT_LEAK_SEX_OFFSETS,
        leak_age_slopes=DEFAULT_LEAK_AGE_SLOPES,
    )


def _site_ids(cfg: Mapping[str, Any]) -> list[str]:
    return [s["site_id"] for s in cfg["cohort"]["sites"]]


def load_schema(out: RunPaths, site: str) -> FeatureSchema:
    doc = _read_json(out.schema(site), "schema", "synth")
    return FeatureSchema.from_dict(doc["schema"])


def load_windows(out: RunPaths, site: str) -> list[WindowRecord]:
    _require(out.windows(site), "synth")
    _, records = read_jsonl(out.windows(site), kind="windows")
    return [WindowRecord.from_dict(r) for r in records]


def load_splits(out: RunPaths) -> dict[str, Splits]:
    doc = _read_json(out.splits(), "splits", "synth")
    return {site: Splits.from_dict(d) for site, d in doc["splits"].items()}


def _window_key(w: WindowRecord) -> tuple[str, int]:
    return (w.stay_id, w.window_index)


# ---------------------------------------------------------------------------
# Stages: synth, serialize, summarize, embed, grid
# ---------------------------------------------------------------------------


def run_synth(cfg: Mapping[str, Any], out: RunPaths, force: bool = False) -> list[Path]:
    digest = write_run_config(cfg, out, force)
    spec = build_cohort_spec(cfg)
    cohort = generate_synthetic_cohort(spec)

    written = [out.config()]
    splits: dict[str, Any] = {}
    summary: dict[str, Any] = {}
    split_seed = stage_seed(cfg["seed"], "split")
    for site_id in _site_ids(cfg):
        site = cohort[site_id]
        _write_json(out.schema(site_id), {"schema": site.schema.to_dict()}, "schema", digest)
        write_jsonl(
            out.stays(site_id),
            [s.to_dict() for s in site.stays],
            kind="stays",
            digest=digest,
            extra_header={"site_id": site_id},
        )
        windows = windows_with_labels(site)
        windows.sort(key=_window_key)
        write_jsonl(
            out.windows(site_id),
            [w.to_dict() for w in windows],
            kind="windows",
            digest=digest,
            extra_header={"site_id": site_id},
        )
        splits[site_id] = split_cohort(
            site.stays, tuple(cfg["cohort"]["split"]), seed=split_seed
        ).to_dict()
        summary[site_id] = {
            "n_stays": len(site.stays),
            "n_windows": len(windows),
            "mortality_rate": sum(1 for s in site.stays if s.mortality) / len(site.stays),
            "schema_features": len(site.schema.features),
        }
        written += [out.schema(site_id), out.stays(site_id), out.windows(site_id)]

    _write_json(out.splits(), {"splits": splits}, "splits", digest)
    _write_json(out.cohort_summary(), {"sites": summary}, "cohort_summary", digest)
    written += [out.splits(), out.cohort_summary()]
    return written


def run_serialize(cfg: Mapping[str, Any], out: RunPaths, force: bool = False) -> list[Path]:
    digest = write_run_config(cfg, out, force)
    style = "template" if cfg["arm"] == "template" else "canonical"
    written = []
    for site_id in _site_ids(cfg):
        schema = load_schema(out, site_id)
        windows = load_windows(out, site_id)
        records = []
        for w in windows:
            text = (
                serialize_template(w, schema)
                if style == "template"
                else serialize_canonical(w, schema)
            )
            records.append(
                {
                    "stay_id": w.stay_id,
                    "window_index": w.window_index,
                    "style": style,
                    "text": text,
                    "token_count": count_tokens(text),
                }
            )
        write_jsonl(
            out.texts(site_id),
            records,
            kind="texts",
            digest=digest,
            extra_header={"site_id": site_id, "style": style},
        )
        written.append(out.texts(site_id))
    return written


def _summarizer_backend(cfg: Mapping[str, Any], schema: FeatureSchema):
    s = cfg["summarize"]
    if s["backend"] == "mock":
        return MockSummarizer(schema)
    if s["backend"] == "remote":
        if not s.get("url") or not s.get("model"):
            raise ValidationError("summarize.url and summarize.model are required for remote")
        return RemoteSummarizer(url=s["url"], model=s["model"])
    raise ValidationError(f"unknown summarize backend {s['backend']!r}")


def run_summarize(cfg: Mapping[str, Any], out: RunPaths, force: bool = False) -> list[Path]:
    digest = write_run_config(cfg, out, force)
    arm = cfg["arm"]
    if arm in GRID_ARMS:
        raise ValidationError(f"arm {arm!r} has no summarize stage; run `r2v grid` instead")
    written = []
    for site_id in _site_ids(cfg):
        _require(out.texts(site_id), "serialize")
        header, text_records = read_jsonl(out.texts(site_id), kind="texts")
        _check_digest(header.get("config_digest"), digest, str(out.texts(site_id)), force)

        if arm in ("no_summary", "template"):
            summaries = [
                Summary(
                    stay_id=r["stay_id"],
                    window_index=r["window_index"],
                    text=r["text"],
                    prompt_kind="none",
                    backend_id="passthrough",
                    token_count=r["token_count"],
                )
                for r in text_records
            ]
        else:
            schema = load_schema(out, site_id)
            windows = load_windows(out, site_id)
            by_key = {_window_key(w): w for w in windows}
            ordered = [by_key[(r["stay_id"], r["window_index"])] for r in text_records]
            backend = _summarizer_backend(cfg, schema)
            cache = SummaryCache(default_cache_dir()) if cfg["summarize"]["backend"] == "remote" else None
            summaries = summarize_windows(
                ordered,
                schema,
                cfg["summarize"]["prompt_kind"],
                backend,
                cache=cache,
                max_workers=int(cfg["summarize"]["max_workers"]),
                serialized_texts=[r["text"] for r in text_records],
            )
        write_jsonl(
            out.summaries(site_id),
            [s.to_dict() for s in summaries],
            kind="summaries",
            digest=digest,
            extra_header={"site_id": site_id},
        )
        written.append(out.summaries(site_id))
    return written


def _embed_backend(cfg: Mapping[str, Any]):
    e = cfg["embed"]
    if e["backend"] == "mock":
        return MockEmbedder(salt=e.get("salt", "r2v"))
    if e["backend"] == "remote":
        if not e.get("url") or not e.get("model"):
            raise ValidationError("embed.url and embed.model are required for remote")
        return RemoteEmbedder(url=e["url"], model=e["model"], batch_size=int(e["batch_size"]))
    raise ValidationError(f"unknown embed backend {e['backend']!r}")


def run_embed(cfg: Mapping[str, Any], out: RunPaths, force: bool = False) -> list[Path]:
    digest = write_run_config(cfg, out, force)
    if cfg["arm"] in GRID_ARMS:
        raise ValidationError(f"arm {cfg['arm']!r} has no embed stage; run `r2v grid` instead")
    econf = EmbedConfig(
        dim=int(cfg["embed"]["dim"]),
        pooling=cfg["embed"]["pooling"],
        normalize=cfg["embed"]["normalize"],
    )
    backend = _embed_backend(cfg)
    written = []
    for site_id in _site_ids(cfg):
        _require(out.summaries(site_id), "summarize")
        header, records = read_jsonl(out.summaries(site_id), kind="summaries")
        _check_digest(header.get("config_digest"), digest, str(out.summaries(site_id)), force)
        vectors = embed_texts([r["text"] for r in records], econf, backend)
        matrix = np.stack([v.values for v in vectors]).astype(np.float32)
        row_index = [
            {"stay_id": r["stay_id"], "window_index": r["window_index"]} for r in records
        ]
        write_matrix(
            out.embeddings(site_id),
            matrix,
            kind="embeddings",
            row_index=row_index,
            digest=digest,
            extra_header={
                "site_id": site_id,
                "backend_id": vectors[0].backend_id if vectors else "",
                "pooling": econf.pooling,
                "normalize": econf.normalize,
            },
        )
        written.append(out.embeddings(site_id))
    return written


def run_grid(cfg: Mapping[str, Any], out: RunPaths, force: bool = False) -> list[Path]:
    """Hourly raw grids (values and mask, un-imputed) plus train-split stats."""
    digest = write_run_config(cfg, out, force)
    splits = load_splits(out)
    written = []
    for site_id in _site_ids(cfg):
        schema = load_schema(out, site_id)
        windows = load_windows(out, site_id)
        grids = [to_grid(w, schema) for w in windows]
        matrix = np.stack([flatten_grid(g.values, g.mask) for g in grids]).astype(np.float32)
        row_index = [
            {"stay_id": w.stay_id, "window_index": w.window_index} for w in windows
        ]
        write_matrix(
            out.grids(site_id),
            matrix,
            kind="grids",
            row_index=row_index,
            digest=digest,
            extra_header={
                "site_id": site_id,
                "n_features": len(schema.features),
                "t_hours": WINDOW_HOURS,
            },
        )
        train_ids = set(splits[site_id].train)
        train_grids = [g for w, g in zip(windows, grids) if w.stay_id in train_ids]
        if not train_grids:
            raise ValidationError(f"no training stays for site {site_id}")
        stats = fit_norm_stats(train_grids)
        _write_json(out.grid_stats(site_id), {"stats": stats.to_dict()}, "grid_stats", digest)
        written += [out.grids(site_id), out.grid_stats(site_id)]
    return written


# ---------------------------------------------------------------------------
# Feature/target assembly for training and evaluation
# ---------------------------------------------------------------------------


def load_grid_stats(out: RunPaths, site: str) -> NormStats:
    doc = _read_json(out.grid_stats(site), "grid_stats", "grid")
    return NormStats.from_dict(doc["stats"])


def representation_matrix(
    cfg: Mapping[str, Any],
    out: RunPaths,
    site: str,
    stats: NormStats | None = None,
) -> tuple[np.ndarray, list[tuple[str, int]]]:
    """The run's representation for every window of a site, plus row keys.

    Summary arms read the packed embeddings. Grid arms read the raw grids,
    impute with the arm's mode, and z-score; ``stats`` overrides the site's
    own training statistics (transfer evaluates target windows under the
    source site's statistics, since those are part of the trained pipeline).
    """
    arm = cfg["arm"]
    if arm in SUMMARY_ARMS:
        _require(out.embeddings(site), "embed")
        matrix, header, records = read_matrix(out.embeddings(site), "embeddings")
        keys = [(r["stay_id"], int(r["window_index"])) for r in records]
        return matrix.astype(np.float64), keys

    mode = arm.split(":", 1)[1]
    _require(out.grids(site), "grid")
    matrix, header, records = read_matrix(out.grids(site), "grids")
    n_features = int(header["n_features"])
    t_hours = int(header["t_hours"])
    if stats is None:
        stats = load_grid_stats(out, site)
    feature_names = stats.feature_names

    rows = np.empty_like(matrix, dtype=np.float64)
    for i in range(matrix.shape[0]):
        values, mask = unflatten_grid(matrix[i].astype(np.float64), n_features, t_hours)
        grid = GridTensor(values=values, mask=mask, feature_names=feature_names)
        filled = impute(grid, mode, stats)
        normed = apply_norm(filled, stats)
        rows[i] = flatten_grid(normed.values, normed.mask)
    keys = [(r["stay_id"], int(r["window_index"])) for r in records]
    return rows, keys


def _forecast_stats(
    windows: Sequence[WindowRecord], keys: Sequence[tuple[str, int]], train_keys: set[tuple[str, int]]
) -> dict[str, list[float]]:
    """Per-feature mean/std of observed forecast-target cells on the train split."""
    by_key = {_window_key(w): w for w in windows}
    first = by_key[keys[0]].labels.forecast_target
    d = first.shape[0]
    total = np.zeros(d)
    total_sq = np.zeros(d)
    count = np.zeros(d)
    for key in keys:
        if key not in train_keys:
            continue
        target = by_key[key].labels.forecast_target
        m = target.mask
        total += (target.values * m).sum(axis=1)
        total_sq += (target.values**2 * m).sum(axis=1)
        count += m.sum(axis=1)
    safe = np.maximum(count, 1.0)
    mean = total / safe
    var = np.maximum(total_sq / safe - mean**2, 0.0)
    std = np.maximum(np.sqrt(var), STD_FLOOR)
    mean[count == 0] = 0.0
    return {"mean": mean.tolist(), "std": std.tolist()}


def task_out_dim(task: str, windows: Sequence[WindowRecord]) -> int:
    if task == "forecast":
        ft = windows[0].labels.forecast_target
        return ft.shape[0] * ft.shape[1]
    if task == "los" or task == "mortality":
        return 1
    if task == "drug":
        return 2
    if task == "lab":
        return len(windows[0].labels.labs)
    raise ValidationError(f"unknown task {task!r}")


def task_targets(
    task: str,
    windows_by_key: Mapping[tuple[str, int], WindowRecord],
    keys: Sequence[tuple[str, int]],
    stats: Mapping[str, Any],
) -> tuple[np.ndarray, np.ndarray | None]:
    """Target matrix (and mask for forecast) for the given rows, in row order."""
    if task == "forecast":
        mean = np.asarray(stats["forecast"]["mean"])[:, None]
        std = np.asarray(stats["forecast"]["std"])[:, None]
        ys = []
        masks = []
        for key in keys:
            target = windows_by_key[key].labels.forecast_target
            ys.append(((target.values - mean) / std).ravel())
            masks.append(target.mask.ravel())
        return np.stack(ys), np.stack(masks)
    if task == "los":
        mean = float(stats["los"]["mean"])
        std = float(stats["los"]["std"])
        y = np.array(
            [(windows_by_key[k].labels.los_remaining - mean) / std for k in keys]
        )[:, None]
        return y, None
    if task == "mortality":
        return np.array([float(windows_by_key[k].labels.mortality) for k in keys])[:, None], None
    if task == "drug":
        return np.array([[float(v) for v in windows_by_key[k].labels.drug] for k in keys]), None
    if task == "lab":
        return np.array([[float(v) for v in windows_by_key[k].labels.labs] for k in keys]), None
    raise ValidationError(f"unknown task {task!r}")


TASK_LOSS = {"forecast": "mse", "los": "mae", "mortality": "bce", "drug": "bce", "lab": "bce"}


def score_task(
    task: str,
    head: Head,
    x: np.ndarray,
    y: np.ndarray,
    mask: np.ndarray | None,
    los_std: float | None = None,
) -> dict[str, float]:
    """Primary metric plus extras for one task on one split."""
    preds = predict(head, x)
    if task == "forecast":
        return {"mse": masked_mse(preds, y, mask)}
    if task == "los":
        value = mae(preds[:, 0], y[:, 0])
        extras = {"mae": value}
        if los_std is not None:
            extras["mae_hours"] = value * los_std
        return extras
    if task == "mortality":
        labels = y[:, 0].astype(int)
        return {"auroc": auroc(preds[:, 0], labels), "auprc": auprc(preds[:, 0], labels)}
    # drug / lab: micro precision, recall, f1 at a 0.5 sigmoid threshold
    probs = 1.0 / (1.0 + np.exp(-preds))
    precision, recall, f1 = micro_prf(probs >= 0.5, y >= 0.5)
    return {"recall": recall, "precision": precision, "f1": f1}


PRIMARY_METRIC = {
    "forecast": "mse",
    "los": "mae",
    "mortality": "auroc",
    "drug": "recall",
    "lab": "recall",
}


# ---------------------------------------------------------------------------
# Stages: train, eval, transfer, fewshot
# ---------------------------------------------------------------------------


def _split_keys(
    keys: Sequence[tuple[str, int]], splits: Splits
) -> dict[str, list[int]]:
    assign = splits.assignment()
    out: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    for i, (stay_id, _) in enumerate(keys):
        out[assign[stay_id]].append(i)
    return out


def run_train(cfg: Mapping[str, Any], out: RunPaths, force: bool = False) -> list[Path]:
    digest = write_run_config(cfg, out, force)
    site = cfg["train"]["site"]
    if site not in _site_ids(cfg):
        raise ValidationError(f"train.site {site!r} is not one of the cohort sites")
    windows = load_windows(out, site)
    windows_by_key = {_window_key(w): w for w in windows}
    splits = load_splits(out)[site]
    x, keys = representation_matrix(cfg, out, site)
    if [k for k in keys] != sorted(windows_by_key.keys()):
        raise ValidationError(f"feature rows for {site} do not align with its windows")
    idx = _split_keys(keys, splits)
    if not idx["train"] or not idx["val"]:
        raise ValidationError(f"site {site} train/val splits are empty")

    train_keys = {keys[i] for i in idx["train"]}
    los_values = [windows_by_key[k].labels.los_remaining for k in train_keys]
    los_mean = float(np.mean(los_values))
    los_std = max(float(np.std(los_values)), STD_FLOOR)
    stats = {
        "los": {"mean": los_mean, "std": los_std},
        "forecast": _forecast_stats(windows, keys, train_keys),
    }

    t = cfg["train"]
    history_rows: list[dict[str, Any]] = []
    head_meta: dict[str, Any] = {}
    written = []
    root = stage_seed(cfg["seed"], "train")
    for task in t["tasks"]:
        y, mask = task_targets(task, windows_by_key, keys, stats)
        out_dim = y.shape[1]
        for seed in t["seeds"]:
            init_seed = int(
                np.random.default_rng(
                    np.random.SeedSequence([root, TASKS.index(task), int(seed)])
                ).integers(0, 2**31 - 1)
            )
            head = init_head(t["head"], x.shape[1], out_dim, tuple(t["hidden"]), seed=init_seed)
            cfg_train = TrainCfg(
                loss=TASK_LOSS[task],
                lr=float(t["lr"]),
                weight_decay=float(t["weight_decay"]),
                batch_size=int(t["batch_size"]),
                max_epochs=int(t["max_epochs"]),
                patience=int(t["patience"]),
                seed=init_seed,
            )
            tr = idx["train"]
            va = idx["val"]
            result = train(
                head,
                x[tr],
                y[tr],
                x[va],
                y[va],
                cfg_train,
                mask_train=mask[tr] if mask is not None else None,
                mask_val=mask[va] if mask is not None else None,
            )
            for row in result.history:
                history_rows.append({"task": task, "seed": int(seed), **row})
            meta = {
                "head": head.meta(),
                "task": task,
                "seed": int(seed),
                "site": site,
                "arm": cfg["arm"],
                "best_val": result.best_val,
                "best_epoch": result.best_epoch,
            }
            write_checkpoint(out.head(task, seed), head.params, meta, digest)
            written.append(out.head(task, seed))
            head_meta[f"{task}_seed{seed}"] = {
                "best_val": result.best_val,
                "best_epoch": result.best_epoch,
                "epochs_run": len(result.history),
            }

    write_jsonl(out.train_history(), history_rows, kind="train_history", digest=digest)
    _write_json(
        out.train_meta(),
        {
            "site": site,
            "arm": cfg["arm"],
            "in_dim": int(x.shape[1]),
            "tasks": list(t["tasks"]),
            "seeds": [int(s) for s in t["seeds"]],
            "target_stats": stats,
            "heads": head_meta,
        },
        "train_meta",
        digest,
    )
    written += [out.train_history(), out.train_meta()]
    return written


def _load_head(out: RunPaths, task: str, seed: int) -> Head:
    path = out.head(task, seed)
    _require(path, "train")
    params, meta = read_checkpoint(path)
    spec = meta["head"]
    return Head(
        kind=spec["kind"],
        in_dim=int(spec["in_dim"]),
        out_dim=int(spec["out_dim"]),
        hidden=tuple(spec["hidden"]),
        params={name: params[name] for name in spec["param_order"]},
    )


def _aggregate(per_seed: Mapping[int, Mapping[str, float]]) -> dict[str, dict[str, float]]:
    """mean and population std of every metric key across seeds."""
    keys = sorted({k for v in per_seed.values() for k in v})
    out: dict[str, dict[str, float]] = {}
    for k in keys:
        vals = np.array([v[k] for v in per_seed.values() if k in v])
        out[k] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out


def _evaluate_site(
    cfg: Mapping[str, Any],
    heads_out: RunPaths,
    features_out: RunPaths,
    site: str,
    split_name: str,
    stats_override: NormStats | None,
) -> dict[str, Any]:
    """Score every (task, seed) head on one site's split."""
    meta = _read_json(heads_out.train_meta(), "train_meta", "train")
    stats = meta["target_stats"]
    windows = load_windows(features_out, site)
    windows_by_key = {_window_key(w): w for w in windows}
    splits = load_splits(features_out)[site]
    x, keys = representation_matrix(cfg, features_out, site, stats=stats_override)
    if int(x.shape[1]) != int(meta["in_dim"]):
        raise ValidationError(
            f"feature dim {x.shape[1]} for {site} does not match trained in_dim {meta['in_dim']}"
        )
    idx = _split_keys(keys, splits)[split_name]
    if not idx:
        raise ValidationError(f"site {site} has no {split_name} windows")
    sel_keys = [keys[i] for i in idx]

    results: dict[str, Any] = {}
    for task in meta["tasks"]:
        y, mask = task_targets(task, windows_by_key, sel_keys, stats)
        per_seed: dict[int, dict[str, float]] = {}
        for seed in meta["seeds"]:
            head = _load_head(heads_out, task, seed)
            per_seed[seed] = score_task(
                task,
                head,
                x[idx],
                y,
                mask,
                los_std=float(stats["los"]["std"]),
            )
        results[task] = {
            "per_seed": {str(s): v for s, v in per_seed.items()},
            "aggregate": _aggregate(per_seed),
            "primary": PRIMARY_METRIC[task],
            "direction": TASK_DIRECTION[task],
            "n_windows": len(idx),
        }
    return results


def run_eval(cfg: Mapping[str, Any], out: RunPaths, force: bool = False) -> list[Path]:
    digest = write_run_config(cfg, out, force)
    site = cfg["train"]["site"]
    results = _evaluate_site(cfg, out, out, site, "test", stats_override=None)
    _write_json(
        out.metrics_indist(),
        {"protocol": "in_distribution", "site": site, "arm": cfg["arm"], "tasks": results},
        "metrics",
        digest,
    )
    return [out.metrics_indist()]


def run_transfer(
    cfg: Mapping[str, Any],
    out: RunPaths,
    force: bool = False,
    source: RunPaths | None = None,
    target: RunPaths | None = None,
) -> list[Path]:
    digest = write_run_config(cfg, out, force)
    source = source or out
    target = target or out
    if source.root != out.root or target.root != out.root:
        here = json.loads(out.config().read_text(encoding="utf-8"))
        for other in (source, target):
            if not other.config().exists():
                raise ValidationError(f"missing {other.config()}; run `r2v synth` first")
            doc = json.loads(other.config().read_text(encoding="utf-8"))
            if doc.get("experiment_digest") != here.get("experiment_digest") and not force:
                raise ValidationError(
                    f"{other.root} was built from a different cohort configuration; "
                    "pass --force to compare anyway"
                )

    meta = _read_json(source.train_meta(), "train_meta", "train")
    source_site = meta["site"]
    pairs = cfg["transfer"]["pairs"]
    results: dict[str, Any] = {}
    for pair in pairs:
        src, dst = pair
        if src != source_site:
            raise ValidationError(
                f"transfer pair {pair} starts at {src!r} but the trained heads come "
                f"from {source_site!r}"
            )
        stats_override = None
        if cfg["arm"] in GRID_ARMS:
            stats_override = load_grid_stats(source, src)
        results[f"{src}->{dst}"] = _evaluate_site(
            cfg, source, target, dst, "test", stats_override=stats_override
        )
    _write_json(
        out.metrics_transfer(),
        {"protocol": "transfer", "arm": cfg["arm"], "pairs": results},
        "metrics",
        digest,
    )
    return [out.metrics_transfer()]


def _stratified_shots(
    labels: np.ndarray, k: int, rng: np.random.Generator
) -> np.ndarray:
    """Indices of k shots, half positive where possible."""
    pos = np.flatnonzero(labels > 0.5)
    neg = np.flatnonzero(labels <= 0.5)
    n_pos = min(k // 2, pos.size)
    n_neg = min(k - n_pos, neg.size)
    n_pos = min(k - n_neg, pos.size)  # backfill if negatives ran short
    chosen = np.concatenate(
        [
            rng.choice(pos, size=n_pos, replace=False),
            rng.choice(neg, size=n_neg, replace=False),
        ]
    )
    return np.sort(chosen)


def run_fewshot(
    cfg: Mapping[str, Any],
    out: RunPaths,
    force: bool = False,
    source: RunPaths | None = None,
    target: RunPaths | None = None,
) -> list[Path]:
    digest = write_run_config(cfg, out, force)
    source = source or out
    target = target or out
    fs = cfg["fewshot"]
    task = fs["task"]
    if task != "mortality":
        raise ValidationError("few-shot adaptation currently supports the mortality task")
    src_site, dst_site = fs["pair"]

    meta = _read_json(source.train_meta(), "train_meta", "train")
    if meta["site"] != src_site:
        raise ValidationError(
            f"fewshot.pair starts at {src_site!r} but trained heads come from {meta['site']!r}"
        )
    stats = meta["target_stats"]
    base_seed = int(meta["seeds"][0])
    stats_override = None
    if cfg["arm"] in GRID_ARMS:
        stats_override = load_grid_stats(source, src_site)

    windows = load_windows(target, dst_site)
    windows_by_key = {_window_key(w): w for w in windows}
    splits = load_splits(target)[dst_site]
    x, keys = representation_matrix(cfg, target, dst_site, stats=stats_override)
    idx = _split_keys(keys, splits)
    test_keys = [keys[i] for i in idx["test"]]
    pool_keys = [keys[i] for i in idx["train"]]
    y_test, _ = task_targets(task, windows_by_key, test_keys, stats)
    y_pool, _ = task_targets(task, windows_by_key, pool_keys, stats)
    x_test = x[idx["test"]]
    x_pool = x[idx["train"]]

    base_head = _load_head(source, task, base_seed)
    zero_shot = auroc(predict(base_head, x_test)[:, 0], y_test[:, 0].astype(int))

    shot_root = stage_seed(cfg["seed"], "fewshot")
    per_seed = []
    for seed in fs["seeds"]:
        rng = np.random.default_rng(np.random.SeedSequence([shot_root, int(seed)]))
        shots = _stratified_shots(y_pool[:, 0], int(fs["shots"]), rng)
        head = _load_head(source, task, base_seed)
        head, _history = fewshot_finetune(head, x_pool[shots], y_pool[shots], loss="bce")
        adapted = auroc(predict(head, x_test)[:, 0], y_test[:, 0].astype(int))
        per_seed.append(
            {
                "seed": int(seed),
                "zero_shot_auroc": zero_shot,
                "adapted_auroc": adapted,
                "gain": adapted - zero_shot,
                "n_shots": int(shots.size),
            }
        )
    gains = [r["gain"] for r in per_seed]
    _write_json(
        out.fewshot(),
        {
            "protocol": "fewshot",
            "arm": cfg["arm"],
            "pair": [src_site, dst_site],
            "shots": int(fs["shots"]),
            "per_seed": per_seed,
            "mean_gain": float(np.mean(gains)),
            "mean_adapted_auroc": float(np.mean([r["adapted_auroc"] for r in per_seed])),
            "zero_shot_auroc": zero_shot,
        },
        "fewshot",
        digest,
    )
    return [out.fewshot()]


# ---------------------------------------------------------------------------
# Stages: privacy, tokens
# ---------------------------------------------------------------------------


def run_privacy(cfg: Mapping[str, Any], out: RunPaths, force: bool = False) -> list[Path]:
    digest = write_run_config(cfg, out, force)
    site = cfg["privacy"]["site"]
    windows = load_windows(out, site)
    windows_by_key = {_window_key(w): w for w in windows}
    x, keys = representation_matrix(cfg, out, site)
    demographics = [windows_by_key[k].demographics for k in keys]

    probes: dict[str, Any] = {"sex": [], "age": []}
    for seed in cfg["privacy"]["seeds"]:
        for kind in ("sex", "age"):
            r = privacy_probe(x, demographics, kind, seed=int(seed))
            probes[kind].append(
                {
                    "seed": int(seed),
                    "score": r.score,
                    "baseline": r.baseline,
                    "n_train": r.n_train,
                    "n_test": r.n_test,
                }
            )
    sex_scores = [p["score"] for p in probes["sex"]]
    age_scores = [p["score"] for p in probes["age"]]
    age_baselines = [p["baseline"] for p in probes["age"]]
    _write_json(
        out.privacy(),
        {
            "protocol": "privacy",
            "arm": cfg["arm"],
            "site": site,
            "leak_demographics": bool(cfg["cohort"]["leak_demographics"]),
            "probes": probes,
            "sex_auroc_mean": float(np.mean(sex_scores)),
            "age_mae_mean": float(np.mean(age_scores)),
            "age_baseline_mae_mean": float(np.mean(age_baselines)),
        },
        "privacy",
        digest,
    )
    return [out.privacy()]


def run_tokens(cfg: Mapping[str, Any], out: RunPaths, force: bool = False) -> list[Path]:
    digest = write_run_config(cfg, out, force)
    if cfg["arm"] in GRID_ARMS:
        raise ValidationError(f"arm {cfg['arm']!r} produces no text; token stats need a text arm")
    per_site: dict[str, Any] = {}
    for site_id in _site_ids(cfg):
        _require(out.texts(site_id), "serialize")
        _require(out.summaries(site_id), "summarize")
        _, texts = read_jsonl(out.texts(site_id), kind="texts")
        _, summaries = read_jsonl(out.summaries(site_id), kind="summaries")
        text_tokens = np.array([r["token_count"] for r in texts], dtype=np.float64)
        summary_tokens = np.array([r["token_count"] for r in summaries], dtype=np.float64)
        per_site[site_id] = {
            "n_windows": int(text_tokens.size),
            "serialized_mean": float(text_tokens.mean()),
            "serialized_median": float(np.median(text_tokens)),
            "serialized_max": int(text_tokens.max()),
            "summary_mean": float(summary_tokens.mean()),
            "summary_median": float(np.median(summary_tokens)),
            "summary_max": int(summary_tokens.max()),
            "reduction_ratio": float(text_tokens.mean() / summary_tokens.mean()),
        }
    _write_json(out.token_stats(), {"sites": per_site}, "token_stats", digest)
    return [out.token_stats()]


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------


def run_stage(
    stage: str,
    cfg: Mapping[str, Any],
    out_dir: str | Path,
    force: bool = False,
    source_dir: str | Path | None = None,
    target_dir: str | Path | None = None,
) -> list[Path]:
    """Run one pipeline stage into ``out_dir`` and return the written paths."""
    if stage not in STAGES:
        raise ValidationError(f"unknown stage {stage!r}; choose from {', '.join(STAGES)}")
    cfg = validate_config(cfg)
    out = RunPaths(out_dir)
    out.root.mkdir(parents=True, exist_ok=True)
    source = RunPaths(source_dir) if source_dir else None
    target = RunPaths(target_dir) if target_dir else None

    if stage == "synth":
        return run_synth(cfg, out, force)
    if stage == "serialize":
        return run_serialize(cfg, out, force)
    if stage == "summarize":
        return run_summarize(cfg, out, force)
    if stage == "embed":
        return run_embed(cfg, out, force)
    if stage == "grid":
        return run_grid(cfg, out, force)
    if stage == "train":
        return run_train(cfg, out, force)
    if stage == "eval":
        return run_eval(cfg, out, force)
    if stage == "transfer":
        return run_transfer(cfg, out, force, source, target)
    if stage == "fewshot":
        return run_fewshot(cfg, out, force, source, target)
    if stage == "privacy":
        return run_privacy(cfg, out, force)
    if stage == "tokens":
        return run_tokens(cfg, out, force)

    from .report import run_ranks, run_report

    if stage == "ranks":
        return run_ranks(cfg, out, force)
    return run_report(cfg, out, force)


def stages_for_arm(arm: str) -> list[str]:
    """The stage sequence that takes a fresh run dir to eval for an arm."""
    arm = normalize_arm(arm)
    if arm in GRID_ARMS:
        return ["synth", "grid", "train", "eval"]
    return ["synth", "serialize", "summarize", "embed", "train", "eval"]


def run_protocol(
    cfg: Mapping[str, Any],
    out_dir: str | Path,
    stages: Sequence[str] | None = None,
    force: bool = False,
) -> list[Path]:
    """Convenience: run several stages in order into one run dir."""
    written: list[Path] = []
    for stage in stages or stages_for_arm(validate_config(cfg)["arm"]):
        written += run_stage(stage, cfg, out_dir, force=force)
    return written
