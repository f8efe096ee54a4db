"""Core datatype invariants: schemas, grids, windows, metric tables."""

from __future__ import annotations

import numpy as np
import pytest

from record2vec.core import (
    Demographics,
    FeatureSchema,
    FeatureSpec,
    GridTensor,
    MetricTable,
    TaskLabels,
    WindowRecord,
    validate_window,
)


def make_schema() -> FeatureSchema:
    return FeatureSchema(
        site_id="site_x",
        features=(
            FeatureSpec("HeartRate", "continuous", "bpm"),
            FeatureSpec("ALP", "continuous", "U/L", display="ALP"),
            FeatureSpec("Analgesia", "binary"),
        ),
    )


def make_window(**kwargs) -> WindowRecord:
    base = dict(
        stay_id="site_x-00001",
        site_id="site_x",
        window_index=0,
        continuous_obs={"HeartRate": ((1.0, 88.0), (5.0, 92.5))},
        binary_events={"Analgesia": (3, 4)},
        demographics=Demographics(age=61.0, sex="F"),
    )
    base.update(kwargs)
    return WindowRecord(**base)


# ---------------------------------------------------------------------------
# Schema
# ---------------------------------------------------------------------------


def test_schema_rejects_duplicate_names():
    with pytest.raises(ValueError, match="duplicate"):
        FeatureSchema(
            site_id="s",
            features=(FeatureSpec("A", "continuous"), FeatureSpec("A", "binary")),
        )


def test_feature_spec_rejects_unknown_kind():
    with pytest.raises(ValueError, match="unknown feature kind"):
        FeatureSpec("A", "categorical")


def test_schema_accessors_preserve_order():
    schema = make_schema()
    assert schema.names() == ("HeartRate", "ALP", "Analgesia")
    assert schema.continuous_names() == ("HeartRate", "ALP")
    assert schema.binary_names() == ("Analgesia",)
    assert "ALP" in schema and "Magnesium" not in schema
    assert schema.spec_of("ALP").display == "ALP"
    with pytest.raises(KeyError):
        schema.spec_of("Magnesium")


def test_schema_dict_round_trip():
    schema = make_schema()
    assert FeatureSchema.from_dict(schema.to_dict()) == schema


# ---------------------------------------------------------------------------
# GridTensor
# ---------------------------------------------------------------------------


def test_grid_tensor_freezes_arrays():
    grid = GridTensor(np.zeros((2, 4)), np.zeros((2, 4)), ("a", "b"))
    with pytest.raises(ValueError):
        grid.values[0, 0] = 1.0


def test_grid_tensor_shape_checks():
    with pytest.raises(ValueError, match="mask shape"):
        GridTensor(np.zeros((2, 4)), np.zeros((2, 3)), ("a", "b"))
    with pytest.raises(ValueError, match="feature names"):
        GridTensor(np.zeros((2, 4)), np.zeros((2, 4)), ("a",))
    with pytest.raises(ValueError, match="2-D"):
        GridTensor(np.zeros(4), np.zeros(4), ("a",))


def test_grid_tensor_mask_must_be_binary():
    with pytest.raises(ValueError, match="0.0 or 1.0"):
        GridTensor(np.zeros((1, 3)), np.full((1, 3), 0.5), ("a",))


def test_grid_with_values_keeps_mask():
    grid = GridTensor(np.zeros((1, 3)), np.array([[1.0, 0.0, 1.0]]), ("a",))
    out = grid.with_values(np.ones((1, 3)))
    assert np.array_equal(out.mask, grid.mask)
    assert out.feature_names == grid.feature_names
    assert np.all(out.values == 1.0)


def test_grid_dict_round_trip():
    grid = GridTensor(
        np.array([[1.5, 0.0], [0.0, 2.5]]),
        np.array([[1.0, 0.0], [0.0, 1.0]]),
        ("a", "b"),
    )
    back = GridTensor.from_dict(grid.to_dict())
    assert np.array_equal(back.values, grid.values)
    assert np.array_equal(back.mask, grid.mask)
    assert back.feature_names == grid.feature_names


# ---------------------------------------------------------------------------
# Windows and labels
# ---------------------------------------------------------------------------


def test_window_dict_round_trip():
    window = make_window(
        labels=TaskLabels(
            mortality=True,
            los_remaining=30.5,
            drug=(True, False),
            labs=(False, True, True),
            lab_names=("ALP", "Lactate", "WBC"),
        )
    )
    back = WindowRecord.from_dict(window.to_dict())
    assert back == window


def test_n_observations_counts_both_kinds():
    assert make_window().n_observations() == 4


def test_validate_window_passes_clean_window():
    assert validate_window(make_window(), make_schema()) == []


def test_validate_window_flags_problems():
    schema = make_schema()
    bad = make_window(
        continuous_obs={"HeartRate": ((50.0, 88.0), (3.0, np.nan)), "Mystery": ((1.0, 2.0),)},
        binary_events={"Analgesia": (4, 3)},
    )
    violations = "\n".join(validate_window(bad, schema))
    assert "hour out of [0,48)" in violations
    assert "not sorted" in violations
    assert "non-finite" in violations
    assert "unknown feature Mystery" in violations


def test_validate_window_rejects_kind_swaps():
    schema = make_schema()
    swapped = make_window(
        continuous_obs={"Analgesia": ((1.0, 2.0),)},
        binary_events={"HeartRate": (2,)},
    )
    violations = "\n".join(validate_window(swapped, schema))
    assert "binary feature carries continuous observations" in violations
    assert "continuous feature carries binary events" in violations


# ---------------------------------------------------------------------------
# MetricTable
# ---------------------------------------------------------------------------


def test_metric_table_set_get_has():
    table = MetricTable()
    table.direction["t1"] = "higher"
    table.set("m1", "t1", 0.5)
    table.set("m1", "t1", 0.7)  # overwrite, no duplicate axes
    assert table.methods == ["m1"] and table.tasks == ["t1"]
    assert table.get("m1", "t1") == 0.7
    assert table.has("m1", "t1") and not table.has("m2", "t1")
    assert table.get("m2", "t1") is None


def test_metric_table_complete_methods_and_restriction():
    table = MetricTable()
    table.set("full", "t1", 1.0)
    table.set("full", "t2", 2.0)
    table.set("holey", "t1", 3.0)
    assert table.complete_methods() == ["full"]
    assert table.complete_methods(["t1"]) == ["full", "holey"]
    sub = table.restricted(["holey"])
    assert sub.methods == ["holey"]
    assert sub.get("holey", "t1") == 3.0


def test_metric_table_dict_round_trip():
    table = MetricTable()
    table.direction["t"] = "lower"
    table.set("m", "t", 0.25)
    back = MetricTable.from_dict(table.to_dict())
    assert back.get("m", "t") == 0.25
    assert back.direction == {"t": "lower"}
