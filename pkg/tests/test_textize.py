"""Serializer fidelity: byte-exact rendering and exact parser inversion."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from record2vec.core import Demographics, FeatureSchema, FeatureSpec, WindowRecord
from record2vec.textize import (
    ParseError,
    count_tokens,
    display_name,
    format_real,
    parse_canonical,
    serialize_canonical,
    serialize_template,
    tokenize,
)


def schema_of(*specs: FeatureSpec) -> FeatureSchema:
    return FeatureSchema(site_id="s", features=specs)


def window_of(schema: FeatureSchema, continuous=None, binary=None) -> WindowRecord:
    return WindowRecord(
        stay_id="s-00000",
        site_id="s",
        window_index=0,
        continuous_obs=continuous or {},
        binary_events=binary or {},
        demographics=Demographics(age=50.0, sex="M"),
    )


# ---------------------------------------------------------------------------
# Tokenizer and number formatting
# ---------------------------------------------------------------------------


def test_tokenize_splits_alnum_runs_and_punctuation():
    assert tokenize("HR has value 104.5 in hour 3.") == [
        "HR", "has", "value", "104", ".", "5", "in", "hour", "3", ".",
    ]
    assert count_tokens("a, b") == 3
    assert tokenize("") == []


def test_format_real_drops_integral_suffix():
    assert format_real(66.0) == "66"
    assert format_real(-3.0) == "-3"
    assert format_real(104.5) == "104.5"


@given(st.floats(allow_nan=False, allow_infinity=False, width=64))
def test_format_real_parses_back_exactly(x):
    assert float(format_real(x)) == x


def test_display_name_splits_camel_case():
    assert display_name("HeartRate") == "Heart Rate"
    assert display_name("BloodUreaNitrogen") == "Blood Urea Nitrogen"
    schema = schema_of(FeatureSpec("ALP", "continuous", display="ALP"))
    assert display_name("ALP", schema) == "ALP"


# ---------------------------------------------------------------------------
# Canonical serialization
# ---------------------------------------------------------------------------


def test_single_observation_sentence_is_byte_exact():
    schema = schema_of(FeatureSpec("ALP", "continuous", "U/L", display="ALP"))
    window = window_of(schema, continuous={"ALP": ((31.0, 66.0),)})
    assert serialize_canonical(window, schema) == "ALP has value 66 in hour 31."


def test_event_run_sentence_is_byte_exact():
    schema = schema_of(FeatureSpec("Analgesia", "binary"))
    window = window_of(schema, binary={"Analgesia": (32, 33, 34, 35, 36, 37, 38, 39)})
    assert (
        serialize_canonical(window, schema)
        == "Patient receives Analgesia at hour 32, 33, 34, 35, 36, 37, 38, 39."
    )


def test_serialization_follows_schema_order_and_skips_empty():
    schema = schema_of(
        FeatureSpec("Analgesia", "binary"),
        FeatureSpec("HeartRate", "continuous"),
        FeatureSpec("Lactate", "continuous"),
    )
    window = window_of(
        schema,
        continuous={"HeartRate": ((1.0, 88.0), (2.5, 91.0))},
        binary={"Analgesia": (3,)},
    )
    text = serialize_canonical(window, schema)
    assert text == (
        "Patient receives Analgesia at hour 3. "
        "Heart Rate has value 88 in hour 1, value 91 in hour 2.5."
    )
    assert serialize_canonical(window_of(schema), schema) == ""


def test_template_serialization_one_line_per_event():
    schema = schema_of(
        FeatureSpec("HeartRate", "continuous"),
        FeatureSpec("Analgesia", "binary"),
    )
    window = window_of(
        schema,
        continuous={"HeartRate": ((1.0, 88.0),)},
        binary={"Analgesia": (3, 7)},
    )
    text = serialize_template(window, schema, groups={"HeartRate": "vital"})
    assert text.splitlines() == [
        "vital_HeartRate 88 hour 1",
        "bin_Analgesia 1 hour 3",
        "bin_Analgesia 1 hour 7",
    ]


# ---------------------------------------------------------------------------
# Parser inversion
# ---------------------------------------------------------------------------


def test_parse_inverts_mixed_window():
    schema = schema_of(
        FeatureSpec("HeartRate", "continuous"),
        FeatureSpec("Analgesia", "binary"),
    )
    window = window_of(
        schema,
        continuous={"HeartRate": ((1.0, 88.0), (2.5, 91.25))},
        binary={"Analgesia": (3, 7)},
    )
    parsed = parse_canonical(serialize_canonical(window, schema), schema)
    assert parsed.continuous_obs == {"HeartRate": ((1.0, 88.0), (2.5, 91.25))}
    assert parsed.binary_events == {"Analgesia": (3, 7)}


@pytest.mark.parametrize(
    "text, message",
    [
        ("Pulse has value 1 in hour 2.", "unknown feature"),
        ("Heart Rate has value 1 in hour 2", "expected '.'"),
        ("Heart Rate has price 1 in hour 2.", "expected ' has value '"),
        ("Patient receives Analgesia at hour 2.5.", "integer"),
        (
            "Heart Rate has value 1 in hour 2. Heart Rate has value 3 in hour 4.",
            "duplicate sentence",
        ),
    ],
)
def test_parse_rejects_malformed_text(text, message):
    schema = schema_of(
        FeatureSpec("HeartRate", "continuous"),
        FeatureSpec("Analgesia", "binary"),
    )
    with pytest.raises(ParseError, match=message):
        parse_canonical(text, schema)


def test_parse_error_reports_byte_offset():
    schema = schema_of(FeatureSpec("HeartRate", "continuous"))
    with pytest.raises(ParseError) as excinfo:
        parse_canonical("Heart Rate has value x in hour 2.", schema)
    assert excinfo.value.byte_offset == len("Heart Rate has value ")


def test_parse_rejects_ambiguous_display_names():
    schema = schema_of(
        FeatureSpec("HeartRate", "continuous"),
        FeatureSpec("Heart Rate", "continuous"),
    )
    with pytest.raises(ValueError, match="ambiguous"):
        parse_canonical("Heart Rate has value 1 in hour 2.", schema)


# ---------------------------------------------------------------------------
# Round-trip property
# ---------------------------------------------------------------------------

_hours = st.lists(
    st.floats(min_value=0.0, max_value=47.96875, allow_nan=False),
    min_size=1,
    max_size=6,
    unique=True,
).map(sorted)

_values = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(
    cont_hours=_hours,
    values=st.lists(_values, min_size=6, max_size=6),
    event_hours=st.lists(st.integers(min_value=0, max_value=47), min_size=1, max_size=8, unique=True).map(sorted),
)
def test_round_trip_identity_on_generated_windows(cont_hours, values, event_hours):
    schema = schema_of(
        FeatureSpec("HeartRate", "continuous"),
        FeatureSpec("Lactate", "continuous"),
        FeatureSpec("Vasopressors", "binary"),
    )
    obs = tuple((h, v) for h, v in zip(cont_hours, values))
    window = window_of(
        schema,
        continuous={"HeartRate": obs, "Lactate": ((0.5, values[-1]),)},
        binary={"Vasopressors": tuple(event_hours)},
    )
    text = serialize_canonical(window, schema)
    parsed = parse_canonical(text, schema)
    rebuilt = window_of(schema, continuous=parsed.continuous_obs, binary=parsed.binary_events)
    assert serialize_canonical(rebuilt, schema) == text
    assert parsed.continuous_obs["HeartRate"] == obs
    assert parsed.binary_events["Vasopressors"] == tuple(event_hours)
