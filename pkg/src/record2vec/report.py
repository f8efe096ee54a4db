"""Rank tables, win counts, and the final report with figures.

The ranks stage works on the published-results fixtures shipped with the
package: per-task method ranks, win counts, and a rank-distribution figure
per table. The report stage aggregates whatever protocol outputs exist in one
or more run directories (in-distribution metrics, transfer, few-shot,
privacy, token stats) into a single JSON document, a plain-text rendering, a
long-form CSV, and PNG figures.
"""

from __future__ import annotations

import io
import json
import time
from pathlib import Path
from typing import Any, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .artifacts import atomic_write_bytes, atomic_write_text, canonical_json
from .core import MetricTable
from .evalkit import count_wins, rank_methods
from .fixtures import FIXTURE_TABLES, load_fixture_table

# One text chunk with a fixed value replaces the library-version stamp so a
# rerun writes byte-identical PNGs.
_PNG_METADATA = {"Software": "record2vec"}
_FIGURE_DPI = 100


def save_figure(fig, path: Path) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=_FIGURE_DPI, metadata=_PNG_METADATA)
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


# ---------------------------------------------------------------------------
# Ranks stage
# ---------------------------------------------------------------------------


def rank_table(table: MetricTable) -> dict[str, dict[str, int]]:
    """Per-task competition ranks for every method present in the task."""
    return {task: rank_methods(table, task) for task in table.tasks}


def mean_ranks(per_task: Mapping[str, Mapping[str, int]]) -> dict[str, float]:
    totals: dict[str, list[int]] = {}
    for ranks in per_task.values():
        for method, rank in ranks.items():
            totals.setdefault(method, []).append(rank)
    return {m: float(np.mean(v)) for m, v in totals.items()}


def _rank_distribution_figure(name: str, table: MetricTable, per_task) -> "plt.Figure":
    """Horizontal stacked bars: how often each method lands at each rank."""
    methods = list(table.methods)
    max_rank = max(max(r.values()) for r in per_task.values())
    counts = {m: [0] * max_rank for m in methods}
    for ranks in per_task.values():
        for method, rank in ranks.items():
            counts[method][rank - 1] += 1

    order = sorted(methods, key=lambda m: mean_ranks(per_task).get(m, float("inf")))
    fig, ax = plt.subplots(figsize=(8, 0.5 * len(methods) + 1.5))
    left = np.zeros(len(order))
    cmap = plt.get_cmap("viridis")
    for rank in range(max_rank):
        widths = np.array([counts[m][rank] for m in order], dtype=float)
        ax.barh(
            order,
            widths,
            left=left,
            color=cmap(rank / max(max_rank - 1, 1)),
            label=f"rank {rank + 1}",
        )
        left += widths
    ax.set_xlabel("number of task columns")
    ax.set_title(f"rank distribution: {name}")
    ax.legend(fontsize=7, ncol=min(max_rank, 6))
    ax.invert_yaxis()
    fig.tight_layout()
    return fig


def run_ranks(cfg: Mapping[str, Any], out, force: bool = False) -> list[Path]:
    from .pipeline import ValidationError, write_run_config

    digest = write_run_config(cfg, out, force)
    names = cfg["ranks"]["tables"]
    for name in names:
        if name not in FIXTURE_TABLES:
            raise ValidationError(
                f"unknown fixture table {name!r}; choose from {', '.join(FIXTURE_TABLES)}"
            )

    csv_lines = ["table,task,method,value,rank"]
    wins_doc: dict[str, Any] = {}
    written: list[Path] = []
    for name in names:
        table = load_fixture_table(name)
        per_task = rank_table(table)
        for task in table.tasks:
            for method in table.methods:
                if not table.has(method, task):
                    continue
                csv_lines.append(
                    f"{name},{task},{method},{table.get(method, task)},{per_task[task][method]}"
                )
        wins_doc[name] = {
            "wins": count_wins(table),
            "mean_rank": mean_ranks(per_task),
        }
        fig = _rank_distribution_figure(name, table, per_task)
        save_figure(fig, out.ranks_figure(name))
        written.append(out.ranks_figure(name))

    atomic_write_text(out.ranks_csv(), "\n".join(csv_lines) + "\n")
    doc = {"kind": "ranks", "version": 1, "config_digest": digest, "tables": wins_doc}
    atomic_write_text(out.wins(), canonical_json(doc) + "\n")
    written += [out.ranks_csv(), out.wins()]
    return written


# ---------------------------------------------------------------------------
# Report stage
# ---------------------------------------------------------------------------


def _load_optional(path: Path, kind: str) -> dict[str, Any] | None:
    if not path.exists():
        return None
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("kind") != kind:
        raise ValueError(f"{path}: expected kind {kind!r}, found {doc.get('kind')!r}")
    return doc


def collect_run(run_dir: Path) -> dict[str, Any]:
    """Everything reportable that one run directory holds."""
    from .pipeline import RunPaths, ValidationError

    paths = RunPaths(run_dir)
    if not paths.config().exists():
        raise ValidationError(f"missing {paths.config()}; run `r2v synth` first")
    config_doc = json.loads(paths.config().read_text(encoding="utf-8"))
    return {
        "dir": str(run_dir),
        "arm": config_doc["config"]["arm"],
        "config_digest": config_doc["config_digest"],
        "experiment_digest": config_doc["experiment_digest"],
        "indist": _load_optional(paths.metrics_indist(), "metrics"),
        "transfer": _load_optional(paths.metrics_transfer(), "metrics"),
        "fewshot": _load_optional(paths.fewshot(), "fewshot"),
        "privacy": _load_optional(paths.privacy(), "privacy"),
        "tokens": _load_optional(paths.token_stats(), "token_stats"),
    }


def _computed_table(runs: Sequence[Mapping[str, Any]], protocol: str) -> MetricTable | None:
    """A method x task table of primary-metric means across runs, or None."""
    methods: list[str] = []
    tasks: list[str] = []
    direction: dict[str, str] = {}
    cells: dict[tuple[str, str], float] = {}
    for run in runs:
        doc = run[protocol if protocol == "indist" else "transfer"]
        if doc is None:
            continue
        method = run["arm"]
        if method not in methods:
            methods.append(method)
        if protocol == "indist":
            groups = {"": doc["tasks"]}
        else:
            groups = {f"{pair}/": block for pair, block in doc["pairs"].items()}
        for prefix, block in groups.items():
            for task, entry in block.items():
                task_id = f"{prefix}{task}"
                if task_id not in tasks:
                    tasks.append(task_id)
                direction[task_id] = entry["direction"]
                cells[(method, task_id)] = entry["aggregate"][entry["primary"]]["mean"]
    if not cells:
        return None
    table = MetricTable(methods=list(methods), tasks=list(tasks), direction=direction)
    for (m, t), v in cells.items():
        table.set(m, t, v)
    return table


def _format_text_table(table: MetricTable, title: str) -> str:
    """Fixed-width rendering with a star on each task's best value."""
    best: dict[str, float] = {}
    for task in table.tasks:
        vals = [table.get(m, task) for m in table.methods if table.has(m, task)]
        best[task] = max(vals) if table.direction[task] == "higher" else min(vals)

    name_w = max(len("method"), max(len(m) for m in table.methods))
    col_w = max(12, max(len(t) for t in table.tasks) + 1)
    lines = [title, "=" * len(title)]
    header = "method".ljust(name_w) + " | " + "".join(t.rjust(col_w) for t in table.tasks)
    lines.append(header)
    lines.append("-" * len(header))
    for m in table.methods:
        row = m.ljust(name_w) + " | "
        for t in table.tasks:
            if table.has(m, t):
                v = table.get(m, t)
                mark = "*" if v == best[t] else " "
                row += f"{v:.4f}{mark}".rjust(col_w)
            else:
                row += "-".rjust(col_w)
        lines.append(row)
    return "\n".join(lines)


def _metrics_figure(table: MetricTable, title: str) -> "plt.Figure":
    """One subplot per task, one bar per method, primary-metric means."""
    tasks = list(table.tasks)
    methods = list(table.methods)
    ncols = min(5, len(tasks))
    nrows = (len(tasks) + ncols - 1) // ncols
    fig, axes = plt.subplots(
        nrows, ncols, figsize=(2.4 * ncols, 2.6 * nrows), squeeze=False
    )
    cmap = plt.get_cmap("tab10")
    for i, task in enumerate(tasks):
        ax = axes[i // ncols][i % ncols]
        names = [m for m in methods if table.has(m, task)]
        vals = [table.get(m, task) for m in names]
        ax.bar(range(len(names)), vals, color=[cmap(methods.index(m) % 10) for m in names])
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=60, ha="right", fontsize=6)
        arrow = "^" if table.direction[task] == "higher" else "v"
        ax.set_title(f"{task} ({arrow})", fontsize=8)
        ax.tick_params(axis="y", labelsize=6)
    for j in range(len(tasks), nrows * ncols):
        axes[j // ncols][j % ncols].axis("off")
    fig.suptitle(title, fontsize=10)
    fig.tight_layout(rect=(0, 0, 1, 0.96))
    return fig


def _fewshot_figure(docs: Sequence[Mapping[str, Any]]) -> "plt.Figure":
    fig, ax = plt.subplots(figsize=(6, 3.2))
    width = 0.8 / max(len(docs), 1)
    cmap = plt.get_cmap("tab10")
    for i, doc in enumerate(docs):
        seeds = [str(r["seed"]) for r in doc["per_seed"]]
        gains = [r["gain"] for r in doc["per_seed"]]
        xs = np.arange(len(seeds)) + i * width
        ax.bar(xs, gains, width=width, color=cmap(i % 10), label=doc["arm"])
        ax.axhline(doc["mean_gain"], color=cmap(i % 10), linestyle="--", linewidth=0.8)
    first = docs[0]
    ax.set_xticks(np.arange(len(first["per_seed"])) + 0.4 - width / 2)
    ax.set_xticklabels([str(r["seed"]) for r in first["per_seed"]], fontsize=7)
    ax.set_xlabel("shot-sampling seed")
    ax.set_ylabel("AUROC gain over zero-shot")
    ax.set_title(f"{first['shots']}-shot adaptation, {first['pair'][0]} to {first['pair'][1]}")
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.legend(fontsize=7)
    fig.tight_layout()
    return fig


def _privacy_figure(docs: Sequence[Mapping[str, Any]]) -> "plt.Figure":
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    cmap = plt.get_cmap("tab10")
    for i, doc in enumerate(docs):
        sex = [p["score"] for p in doc["probes"]["sex"]]
        age = [p["score"] for p in doc["probes"]["age"]]
        xs = np.arange(len(sex))
        ax1.plot(xs, sex, "o-", color=cmap(i % 10), label=doc["arm"], markersize=4)
        ax2.plot(xs, age, "o-", color=cmap(i % 10), label=doc["arm"], markersize=4)
        ax2.axhline(
            doc["age_baseline_mae_mean"], color=cmap(i % 10), linestyle=":", linewidth=0.8
        )
    ax1.axhline(0.5, color="black", linestyle="--", linewidth=0.8)
    ax1.set_ylim(0.0, 1.0)
    ax1.set_title("sex probe AUROC by seed", fontsize=9)
    ax1.set_xlabel("probe seed index")
    ax2.set_title("age probe MAE by seed (dotted: baseline)", fontsize=9)
    ax2.set_xlabel("probe seed index")
    ax1.legend(fontsize=7)
    fig.tight_layout()
    return fig


def _report_csv(tables: Mapping[str, MetricTable | None]) -> str:
    lines = ["protocol,method,task,value"]
    for protocol, table in tables.items():
        if table is None:
            continue
        for task in table.tasks:
            for method in table.methods:
                if table.has(method, task):
                    lines.append(f"{protocol},{method},{task},{table.get(method, task)}")
    return "\n".join(lines) + "\n"


def run_report(cfg: Mapping[str, Any], out, force: bool = False) -> list[Path]:
    from .pipeline import ValidationError, write_run_config

    started = time.monotonic()
    digest = write_run_config(cfg, out, force)

    run_dirs = [out.root] + [Path(p) for p in cfg["report"]["runs"]]
    seen: list[Path] = []
    runs: list[dict[str, Any]] = []
    for d in run_dirs:
        resolved = d.resolve()
        if resolved in seen:
            continue
        seen.append(resolved)
        runs.append(collect_run(d))

    exp_digests = {r["experiment_digest"] for r in runs}
    if len(exp_digests) > 1 and not force:
        raise ValidationError(
            "report inputs mix different cohort configurations "
            f"(experiment digests {sorted(exp_digests)}); pass --force to combine anyway"
        )
    arms = [r["arm"] for r in runs]
    if len(set(arms)) != len(arms) and not force:
        raise ValidationError(f"report inputs repeat representation arms: {arms}")

    if all(
        r["indist"] is None
        and r["transfer"] is None
        and r["fewshot"] is None
        and r["privacy"] is None
        and r["tokens"] is None
        for r in runs
    ):
        raise ValidationError("no protocol outputs found in the report inputs; run `r2v eval` first")

    indist_table = _computed_table(runs, "indist")
    transfer_table = _computed_table(runs, "transfer")
    fewshot_docs = [r["fewshot"] for r in runs if r["fewshot"] is not None]
    privacy_docs = [r["privacy"] for r in runs if r["privacy"] is not None]
    token_docs = {r["arm"]: r["tokens"] for r in runs if r["tokens"] is not None}

    figures = out.figures_dir()
    figures.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    text_blocks: list[str] = []
    wins: dict[str, Any] = {}
    for protocol, table in (("indist", indist_table), ("transfer", transfer_table)):
        if table is None:
            continue
        title = (
            "In-distribution test metrics" if protocol == "indist" else "Transfer test metrics"
        )
        text_blocks.append(_format_text_table(table, title))
        if len(table.methods) > 1:
            wins[protocol] = count_wins(table, strict=True)
        fig = _metrics_figure(table, title)
        save_figure(fig, figures / f"metrics_{protocol}.png")
        written.append(figures / f"metrics_{protocol}.png")

    if fewshot_docs:
        fig = _fewshot_figure(fewshot_docs)
        save_figure(fig, figures / "fewshot_gains.png")
        written.append(figures / "fewshot_gains.png")
        lines = ["Few-shot adaptation", "==================="]
        for doc in fewshot_docs:
            lines.append(
                f"{doc['arm']}: zero-shot AUROC {doc['zero_shot_auroc']:.4f}, "
                f"mean adapted {doc['mean_adapted_auroc']:.4f}, "
                f"mean gain {doc['mean_gain']:+.4f} over {len(doc['per_seed'])} seeds"
            )
        text_blocks.append("\n".join(lines))

    if privacy_docs:
        fig = _privacy_figure(privacy_docs)
        save_figure(fig, figures / "privacy_probes.png")
        written.append(figures / "privacy_probes.png")
        lines = ["Privacy probes", "=============="]
        for doc in privacy_docs:
            leak = "on" if doc["leak_demographics"] else "off"
            lines.append(
                f"{doc['arm']} (leak {leak}): sex AUROC {doc['sex_auroc_mean']:.4f}, "
                f"age MAE {doc['age_mae_mean']:.2f}y "
                f"(baseline {doc['age_baseline_mae_mean']:.2f}y)"
            )
        text_blocks.append("\n".join(lines))

    if token_docs:
        lines = ["Token budgets", "============="]
        for arm, doc in token_docs.items():
            for site, stats in doc["sites"].items():
                lines.append(
                    f"{arm} {site}: serialized mean {stats['serialized_mean']:.1f} tokens, "
                    f"summary mean {stats['summary_mean']:.1f} tokens, "
                    f"reduction x{stats['reduction_ratio']:.2f}"
                )
        text_blocks.append("\n".join(lines))

    if wins:
        lines = ["Win counts (computed tables)", "============================"]
        for protocol, w in wins.items():
            ordered = sorted(w.items(), key=lambda kv: -kv[1])
            lines.append(protocol + ": " + ", ".join(f"{m}={c}" for m, c in ordered))
        text_blocks.append("\n".join(lines))

    fixture_wins: dict[str, Any] = {}
    if cfg["report"].get("include_fixtures", True):
        for name in FIXTURE_TABLES:
            table = load_fixture_table(name)
            fixture_wins[name] = count_wins(table)

    report_doc = {
        "kind": "report",
        "version": 1,
        "config_digest": digest,
        "experiment_digests": sorted(exp_digests),
        "runs": [
            {"dir": r["dir"], "arm": r["arm"], "config_digest": r["config_digest"]}
            for r in runs
        ],
        "indist": None if indist_table is None else indist_table.to_dict(),
        "transfer": None if transfer_table is None else transfer_table.to_dict(),
        "wins": wins,
        "fewshot": fewshot_docs,
        "privacy": privacy_docs,
        "tokens": token_docs,
        "fixture_wins": fixture_wins,
    }
    atomic_write_text(out.report_json(), canonical_json(report_doc) + "\n")
    atomic_write_text(out.report_text(), "\n\n".join(text_blocks) + "\n")
    atomic_write_text(
        out.report_csv(), _report_csv({"indist": indist_table, "transfer": transfer_table})
    )
    # Wall-clock timing lives in its own sidecar so every other report artifact
    # stays byte-identical across reruns.
    atomic_write_text(
        out.report_meta(),
        canonical_json({"kind": "report_meta", "wall_clock_s": time.monotonic() - started})
        + "\n",
    )
    written += [out.report_json(), out.report_text(), out.report_csv(), out.report_meta()]
    return written