"""Metrics against brute-force references, rankings, wins, privacy probes."""

from __future__ import annotations

import numpy as np
import pytest

from record2vec.core import Demographics, MetricTable
from record2vec.evalkit import (
    auprc,
    auroc,
    count_wins,
    mae,
    masked_mse,
    micro_prf,
    privacy_probe,
    rank_methods,
    rank_values,
    task_aligned_delta,
)


# ---------------------------------------------------------------------------
# Brute-force references
# ---------------------------------------------------------------------------


def brute_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def brute_auprc(scores, labels):
    n_pos = sum(labels)
    total = 0.0
    prev_recall = 0.0
    for threshold in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if y and s >= threshold)
        fp = sum(1 for s, y in zip(scores, labels) if not y and s >= threshold)
        precision = tp / (tp + fp)
        recall = tp / n_pos
        total += (recall - prev_recall) * precision
        prev_recall = recall
    return total


def brute_micro_prf(pred, true):
    tp = fp = fn = 0
    for p, t in zip(np.asarray(pred).astype(bool).ravel(), np.asarray(true).astype(bool).ravel()):
        tp += p and t
        fp += p and not t
        fn += (not p) and t
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def test_auroc_and_auprc_match_brute_force_on_random_instances():
    rng = np.random.default_rng(17)
    for trial in range(200):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, size=n)
        if labels.all() or not labels.any():
            labels[0] = 1 - labels[0]
        # quantized scores so tie handling is actually exercised
        scores = np.round(rng.random(n), 1)
        assert auroc(scores, labels) == pytest.approx(brute_auroc(scores, labels), abs=1e-12)
        assert auprc(scores, labels) == pytest.approx(brute_auprc(list(scores), list(labels)), abs=1e-12)


def test_micro_prf_matches_brute_force():
    rng = np.random.default_rng(23)
    for trial in range(200):
        shape = (int(rng.integers(1, 8)), int(rng.integers(1, 8)))
        pred = rng.integers(0, 2, size=shape)
        true = rng.integers(0, 2, size=shape)
        got = micro_prf(pred, true)
        want = brute_micro_prf(pred, true)
        for g, w in zip(got, want):
            assert g == pytest.approx(w, abs=1e-12)


def test_auroc_edge_cases():
    assert auroc([0.9, 0.1], [1, 0]) == 1.0
    assert auroc([0.1, 0.9], [1, 0]) == 0.0
    assert auroc([0.5, 0.5], [1, 0]) == 0.5
    with pytest.raises(ValueError, match="both classes"):
        auroc([0.5, 0.6], [1, 1])
    with pytest.raises(ValueError, match="1-D"):
        auroc(np.zeros((2, 2)), np.zeros((2, 2)))


def test_auprc_edge_cases():
    assert auprc([0.9, 0.1], [1, 0]) == 1.0
    # all predictions tied: precision equals prevalence
    assert auprc([0.5, 0.5, 0.5, 0.5], [1, 0, 0, 0]) == pytest.approx(0.25)
    with pytest.raises(ValueError, match="at least one positive"):
        auprc([0.5], [0])


def test_mae_and_shape_errors():
    assert mae([1.0, 3.0], [2.0, 1.0]) == pytest.approx(1.5)
    with pytest.raises(ValueError, match="shape mismatch"):
        mae([1.0], [1.0, 2.0])
    with pytest.raises(ValueError, match="shape mismatch"):
        micro_prf(np.zeros((2, 2)), np.zeros((2, 3)))


def test_masked_mse_is_bitwise_invariant_to_masked_cells():
    rng = np.random.default_rng(3)
    pred = rng.normal(size=(6, 48))
    target = rng.normal(size=(6, 48))
    mask = (rng.random((6, 48)) < 0.4).astype(float)
    mask[0, 0] = 1.0  # keep at least one cell
    base = masked_mse(pred, target, mask)

    vandalized = pred.copy()
    vandalized[mask == 0.0] = np.nan
    assert masked_mse(vandalized, target, mask) == base  # bitwise, not approx

    vandalized_t = target.copy()
    vandalized_t[mask == 0.0] = 1e300
    assert masked_mse(pred, vandalized_t, mask) == base

    with pytest.raises(ValueError, match="no cells"):
        masked_mse(pred, target, np.zeros_like(mask))
    with pytest.raises(ValueError, match="share a shape"):
        masked_mse(pred, target, mask[:, :4])


# ---------------------------------------------------------------------------
# Rankings and wins
# ---------------------------------------------------------------------------


def test_rank_values_competition_ties():
    ranks = rank_values({"a": 0.9, "b": 0.9, "c": 0.5, "d": 0.1}, "higher")
    assert ranks == {"a": 1, "b": 1, "c": 3, "d": 4}
    ranks = rank_values({"a": 0.2, "b": 0.5, "c": 0.5}, "lower")
    assert ranks == {"a": 1, "b": 2, "c": 2}
    with pytest.raises(ValueError, match="direction"):
        rank_values({"a": 1.0}, "biggest")


def metric_table():
    table = MetricTable()
    table.direction.update(t1="higher", t2="lower", t3="higher")
    table.set("m1", "t1", 0.9)
    table.set("m2", "t1", 0.8)
    table.set("m1", "t2", 0.3)
    table.set("m2", "t2", 0.2)
    table.set("m1", "t3", 1.0)
    return table


def test_rank_methods_and_errors():
    table = metric_table()
    assert rank_methods(table, "t1") == {"m1": 1, "m2": 2}
    assert rank_methods(table, "t2") == {"m2": 1, "m1": 2}
    assert rank_methods(table, "t3") == {"m1": 1}  # m2 has no cell, excluded
    with pytest.raises(ValueError, match="unknown task"):
        rank_methods(table, "t9")


def test_count_wins_inclusive_ties_and_strict():
    table = metric_table()
    assert count_wins(table) == {"m1": 2, "m2": 1}
    tied = MetricTable()
    tied.direction["t"] = "higher"
    tied.set("a", "t", 0.7)
    tied.set("b", "t", 0.7)
    assert count_wins(tied) == {"a": 1, "b": 1}  # ties win jointly
    with pytest.raises(ValueError, match="missing values"):
        count_wins(table, strict=True)
    # restricting to a subset recounts bests within the subset; tasks where
    # no restricted method reports a value are skipped, not errors
    assert count_wins(table, methods=["m2"]) == {"m2": 2}


def test_task_aligned_delta():
    assert task_aligned_delta(0.9, 0.8, "higher") == pytest.approx(12.5)
    assert task_aligned_delta(0.8, 1.0, "lower") == pytest.approx(20.0)
    assert task_aligned_delta(1.2, 1.0, "lower") == pytest.approx(-20.0)
    with pytest.raises(ValueError, match="zero"):
        task_aligned_delta(1.0, 0.0, "higher")


# ---------------------------------------------------------------------------
# Privacy probes
# ---------------------------------------------------------------------------


def synthetic_people(n, rng, leak_sex, leak_age, dim=32):
    x = rng.normal(size=(n, dim))
    demos = []
    for i in range(n):
        sex = "M" if rng.random() < 0.5 else "F"
        age = float(rng.integers(18, 91))
        if leak_sex and sex == "M":
            x[i, 0] += 4.0
        if leak_age:
            x[i, 1] += (age - 54.0) * 0.1
        demos.append(Demographics(age=age, sex=sex))
    return x, demos


def test_sex_probe_detects_planted_signal_and_not_noise():
    rng = np.random.default_rng(41)
    x, demos = synthetic_people(400, rng, leak_sex=True, leak_age=False)
    leaky = privacy_probe(x, demos, "sex", seed=1)
    assert leaky.score > 0.95
    assert leaky.baseline == 0.5
    assert leaky.n_train + leaky.n_test == 400

    x, demos = synthetic_people(400, rng, leak_sex=False, leak_age=False)
    clean = privacy_probe(x, demos, "sex", seed=1)
    assert 0.35 < clean.score < 0.65


def test_age_probe_beats_constant_baseline_only_with_signal():
    rng = np.random.default_rng(43)
    x, demos = synthetic_people(500, rng, leak_sex=False, leak_age=True)
    leaky = privacy_probe(x, demos, "age", seed=2)
    assert leaky.score < 0.8 * leaky.baseline

    x, demos = synthetic_people(500, rng, leak_sex=False, leak_age=False)
    clean = privacy_probe(x, demos, "age", seed=2)
    assert clean.score <= 1.1 * clean.baseline


def test_privacy_probe_validation():
    rng = np.random.default_rng(5)
    x, demos = synthetic_people(40, rng, leak_sex=False, leak_age=False)
    with pytest.raises(ValueError, match="unknown probe kind"):
        privacy_probe(x, demos, "income")
    with pytest.raises(ValueError, match="one row per demographic"):
        privacy_probe(x[:-1], demos, "sex")
    same = [Demographics(age=50.0, sex="M") for _ in range(40)]
    with pytest.raises(ValueError, match="both classes"):
        privacy_probe(x, same, "sex")
