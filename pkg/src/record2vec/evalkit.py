"""Evaluation primitives: task metrics, method ranking, and privacy probes.

All metrics are implemented directly on numpy arrays with explicit tie
handling, because the comparisons downstream (win counts, prompt rankings)
depend on exact tie semantics rather than on any particular library's
defaults.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import Demographics, MetricTable
from .learn import TrainCfg, init_head, predict, train

AGE_CLIP = (18.0, 90.0)
PROBE_LR = 1e-2
# Probes are trained like any other head: minibatch AdamW with early stopping
# on a held-out slice of the probe-training rows. Genuine leakage keeps the
# validation loss falling until the probe converges, while on independent
# data the probe stops before it can overfit its way off the chance line.
PROBE_MAX_EPOCHS = 400
PROBE_PATIENCE = 10
PROBE_VAL_FRACTION = 0.15
PROBE_TRAIN_FRACTION = 0.7


# ---------------------------------------------------------------------------
# Task metrics
# ---------------------------------------------------------------------------


def auroc(scores: Sequence[float] | np.ndarray, labels: Sequence[int] | np.ndarray) -> float:
    """Area under the ROC curve, ties counted as half concordant.

    Computed as the Mann-Whitney statistic from average ranks, so tied scores
    between a positive and a negative contribute 0.5.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D and the same length")
    y = y.astype(bool)
    n_pos = int(y.sum())
    n_neg = int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs both classes present")

    order = np.argsort(s, kind="stable")
    ranks = np.empty(s.size, dtype=np.float64)
    sorted_scores = s[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        # average of 1-based ranks i+1 .. j+1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1

    rank_sum = float(ranks[y].sum())
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def auprc(scores: Sequence[float] | np.ndarray, labels: Sequence[int] | np.ndarray) -> float:
    """Average precision with step interpolation at distinct thresholds.

    Thresholds sweep the distinct scores in descending order; each step adds
    (recall_i - recall_{i-1}) * precision_i.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D and the same length")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("auprc needs at least one positive")

    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order].astype(np.float64)
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1.0 - y_sorted)

    # Indices where the threshold changes (last element of each tie group).
    distinct = np.flatnonzero(np.diff(s_sorted) != 0.0)
    cut = np.concatenate([distinct, [s_sorted.size - 1]])

    precision = tp[cut] / (tp[cut] + fp[cut])
    recall = tp[cut] / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def micro_prf(
    pred: np.ndarray, true: np.ndarray
) -> tuple[float, float, float]:
    """Micro-averaged precision, recall, F1 over a binary label matrix."""
    p = np.asarray(pred).astype(bool)
    t = np.asarray(true).astype(bool)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    tp = float(np.sum(p & t))
    pred_pos = float(np.sum(p))
    true_pos = float(np.sum(t))
    precision = tp / pred_pos if pred_pos > 0 else 0.0
    recall = tp / true_pos if true_pos > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def mae(pred: Sequence[float] | np.ndarray, target: Sequence[float] | np.ndarray) -> float:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    return float(np.mean(np.abs(p - t)))


def masked_mse(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    """MSE over observed cells only, selected by indexing.

    Unobserved cells are never touched, so their contents (including NaN or
    garbage) cannot change the result in any bit.
    """
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    m = np.asarray(mask)
    if p.shape != t.shape or p.shape != m.shape:
        raise ValueError("pred, target, mask must share a shape")
    idx = m.astype(bool)
    if not idx.any():
        raise ValueError("mask selects no cells")
    diff = p[idx] - t[idx]
    return float(np.mean(diff * diff))


# ---------------------------------------------------------------------------
# Rankings, wins, aligned deltas
# ---------------------------------------------------------------------------


def rank_values(values: Mapping[str, float], direction: str) -> dict[str, int]:
    """Competition ranks: tied methods share the smallest rank of the group."""
    if direction not in ("higher", "lower"):
        raise ValueError(f"direction must be 'higher' or 'lower', got {direction!r}")
    ranks: dict[str, int] = {}
    for name, value in values.items():
        if direction == "higher":
            better = sum(1 for v in values.values() if v > value)
        else:
            better = sum(1 for v in values.values() if v < value)
        ranks[name] = better + 1
    return ranks


def rank_methods(table: MetricTable, task: str) -> dict[str, int]:
    """Rank every method that reports a value for ``task``, best rank 1."""
    if task not in table.tasks:
        raise ValueError(f"unknown task {task!r}")
    direction = table.direction.get(task)
    if direction is None:
        raise ValueError(f"task {task!r} has no recorded direction")
    values = {m: table.get(m, task) for m in table.methods if table.has(m, task)}
    if not values:
        raise ValueError(f"no method reports a value for task {task!r}")
    return rank_values(values, direction)


def count_wins(
    table: MetricTable, methods: Sequence[str] | None = None, strict: bool = False
) -> dict[str, int]:
    """Wins per method across all tasks of a table, ties inclusive.

    For each task the winners are every method whose value equals the best
    value in that task's direction, among the methods that report a value for
    it. Methods with no wins still appear with 0. With ``strict`` a missing
    cell is an error instead of being skipped; published tables legitimately
    omit methods on some tasks, while tables this pipeline computed should
    always be complete.
    """
    names = list(methods) if methods is not None else list(table.methods)
    wins = {m: 0 for m in names}
    for task in table.tasks:
        present = [(m, table.get(m, task)) for m in names if table.has(m, task)]
        if strict and len(present) != len(names):
            absent = [m for m in names if not table.has(m, task)]
            raise ValueError(f"task {task!r} is missing values for {absent}")
        if not present:
            continue
        vals = [v for _, v in present]
        best = max(vals) if table.direction[task] == "higher" else min(vals)
        for m, v in present:
            if v == best:
                wins[m] += 1
    return wins


def task_aligned_delta(value: float, base: float, direction: str) -> float:
    """Percent improvement over ``base``, positive when ``value`` is better."""
    if base == 0:
        raise ValueError("baseline value is zero, delta undefined")
    if direction == "lower":
        return (base - value) / base * 100.0
    if direction == "higher":
        return (value - base) / base * 100.0
    raise ValueError(f"direction must be 'higher' or 'lower', got {direction!r}")


# ---------------------------------------------------------------------------
# Privacy probes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeResult:
    """Outcome of one demographic probe on frozen representations."""

    kind: str  # "sex" | "age"
    score: float  # auroc for sex, raw-years MAE for age
    baseline: float  # 0.5 for sex, constant-median MAE for age
    n_train: int
    n_test: int


def _probe_split(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, n, 7]))
    order = rng.permutation(n)
    n_train = int(np.floor(PROBE_TRAIN_FRACTION * n))
    if n_train == 0 or n_train == n:
        raise ValueError(f"cannot split {n} samples {PROBE_TRAIN_FRACTION:.0%}/{1-PROBE_TRAIN_FRACTION:.0%}")
    return order[:n_train], order[n_train:]


def _fit_linear_probe(x: np.ndarray, y: np.ndarray, loss: str, seed: int):
    rng = np.random.default_rng(np.random.SeedSequence([seed, x.shape[0], 13]))
    order = rng.permutation(x.shape[0])
    n_val = max(1, int(np.floor(PROBE_VAL_FRACTION * x.shape[0])))
    val, tr = order[:n_val], order[n_val:]
    head = init_head("linear", x.shape[1], 1, seed=seed)
    cfg = TrainCfg(
        loss=loss,
        lr=PROBE_LR,
        weight_decay=0.01,
        batch_size=256,
        max_epochs=PROBE_MAX_EPOCHS,
        patience=PROBE_PATIENCE,
        seed=seed,
    )
    y2 = y.reshape(-1, 1)
    return train(head, x[tr], y2[tr], x[val], y2[val], cfg).head


def privacy_probe(
    embeddings: np.ndarray,
    demographics: Sequence[Demographics],
    kind: str,
    seed: int = 0,
) -> ProbeResult:
    """Train a linear probe for a demographic attribute and score it held out.

    Sex is scored by AUROC against a 0.5 chance baseline. Age is scored by
    raw-years MAE (predictions clipped to a plausible adult range) against a
    constant predictor at the training median.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != len(demographics):
        raise ValueError("embeddings must be (n, d) with one row per demographic record")
    train_idx, test_idx = _probe_split(x.shape[0], seed)

    if kind == "sex":
        y = np.array([1.0 if d.sex == "M" else 0.0 for d in demographics])
        if len(set(y[test_idx])) < 2 or len(set(y[train_idx])) < 2:
            raise ValueError("sex probe needs both classes on both sides of the split")
        head = _fit_linear_probe(x[train_idx], y[train_idx], "bce", seed)
        scores = predict(head, x[test_idx])[:, 0]
        return ProbeResult(
            kind="sex",
            score=auroc(scores, y[test_idx]),
            baseline=0.5,
            n_train=train_idx.size,
            n_test=test_idx.size,
        )

    if kind == "age":
        # Ages are clipped to the plausible adult range before standardization
        # so a stray out-of-range value cannot distort the probe's target scale.
        ages = np.clip(
            np.array([d.age for d in demographics], dtype=np.float64),
            AGE_CLIP[0],
            AGE_CLIP[1],
        )
        mean = float(ages[train_idx].mean())
        std = float(ages[train_idx].std())
        std = max(std, 1e-6)
        y = (ages - mean) / std
        head = _fit_linear_probe(x[train_idx], y[train_idx], "mse", seed)
        pred_std = predict(head, x[test_idx])[:, 0]
        pred_years = np.clip(pred_std * std + mean, AGE_CLIP[0], AGE_CLIP[1])
        constant = float(np.median(ages[train_idx]))
        return ProbeResult(
            kind="age",
            score=mae(pred_years, ages[test_idx]),
            baseline=mae(np.full(test_idx.size, constant), ages[test_idx]),
            n_train=train_idx.size,
            n_test=test_idx.size,
        )

    raise ValueError(f"unknown probe kind {kind!r}")
