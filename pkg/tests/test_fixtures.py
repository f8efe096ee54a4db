"""Packaged benchmark tables: loading, shape, directions, derived analyses."""

from __future__ import annotations

import pytest

from record2vec.evalkit import count_wins, rank_methods
from record2vec.fixtures import FIXTURE_TABLES, fixture_text, load_fixture_table


def test_every_fixture_loads_with_consistent_directions():
    for name in FIXTURE_TABLES:
        table = load_fixture_table(name)
        assert table.methods and table.tasks
        for task in table.tasks:
            assert table.direction[task] in ("lower", "higher")


def test_fixture_text_round_trips_and_rejects_unknown():
    text = fixture_text("prompt_indist")
    assert "method,dataset,task,metric,direction,value" in text
    with pytest.raises(KeyError, match="unknown fixture table"):
        fixture_text("secret_table")
    with pytest.raises(KeyError, match="unknown fixture table"):
        load_fixture_table("prompt_indist.csv")  # name, not filename


def test_benchmark_tables_shapes():
    indist = load_fixture_table("indist_benchmark")
    assert len(indist.methods) == 7
    assert len(indist.tasks) == 15  # 3 cohorts x 5 tasks
    transfer = load_fixture_table("transfer_benchmark")
    assert len(transfer.methods) == 8
    assert len(transfer.tasks) == 10

    # the grid-sequence method reports no forecast or length-of-stay cells
    assert not indist.has("GenHPF", "HiRID/Forecast")
    assert indist.has("GenHPF", "HiRID/Mort")


def test_prompt_table_spot_values():
    table = load_fixture_table("prompt_indist")
    assert table.methods == ["zero-shot", "CoT", "ICD", "Trend"]
    assert table.get("ICD", "HiRID/Forecast") == pytest.approx(0.021)
    assert table.get("zero-shot", "HiRID/Forecast") == pytest.approx(0.0244)
    assert table.direction["HiRID/Forecast"] == "lower"
    assert table.direction["HiRID/Mort"] == "higher"


def test_indist_win_counts():
    wins = count_wins(load_fixture_table("indist_benchmark"))
    assert wins["Record2Vec"] == 13
    assert wins["Right shift"] == 1
    assert wins["TSDE"] == 1
    assert sum(wins.values()) == 15


def test_transfer_win_counts():
    wins = count_wins(load_fixture_table("transfer_benchmark"))
    assert wins["Record2Vec"] == 10
    assert wins["TimesFM"] == 2
    assert wins["Record2Vec Template"] == 2


def test_prompt_ranking_on_forecast():
    ranks = rank_methods(load_fixture_table("prompt_indist"), "HiRID/Forecast")
    assert ranks == {"ICD": 1, "zero-shot": 2, "CoT": 3, "Trend": 4}


def test_summarizer_tables_are_complete():
    for name in ("summarizer_indist", "summarizer_transfer"):
        table = load_fixture_table(name)
        assert table.complete_methods() == table.methods
