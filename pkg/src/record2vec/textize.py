"""Text serialization of irregular windows, and the inverse parser.

The canonical form writes one English sentence per observed feature, in
schema order, with raw magnitudes and no normalization:

    ALP has value 66 in hour 31. Heart Rate has value 104.5 in hour 31,
    value 99 in hour 33. Patient receives Analgesia at hour 32, 33.

The template form is a terse line-per-event layout with group prefixes
(lab_/vital_/bin_), kept as a control arm. ``parse_canonical`` inverts the
canonical form exactly, which is what the round-trip tests lean on.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Mapping

from .core import FeatureSchema, WindowRecord

_TOKEN_RE = re.compile(r"[0-9A-Za-z]+|\S")
_CAMEL_RE = re.compile(r"(?<=[a-z])(?=[A-Z])")
_NUM_RE = re.compile(r"-?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?")

_BIN_PREFIX = "Patient receives "


def tokenize(text: str) -> list[str]:
    """Split text under the benchmark rule.

    A maximal run of ASCII alphanumerics is one token; every other
    non-whitespace character is one token on its own. This is a fixed,
    reproducible stand-in for a model tokenizer, used for token-budget
    comparisons and the hashing embedder; absolute counts are not comparable
    to any specific LLM's.
    """
    return _TOKEN_RE.findall(text)


def count_tokens(text: str) -> int:
    """Number of tokens under the benchmark rule (see :func:`tokenize`)."""
    return len(_TOKEN_RE.findall(text))


def display_name(name: str, schema: FeatureSchema | None = None) -> str:
    """Rendered name for a feature.

    An explicit ``display`` on the schema entry wins; otherwise a space is
    inserted before each uppercase letter that follows a lowercase one
    (BloodUreaNitrogen -> "Blood Urea Nitrogen"). Acronyms and names like
    FiO2 that should stay unsplit need the explicit override.
    """
    if schema is not None and name in schema:
        override = schema.spec_of(name).display
        if override is not None:
            return override
    return _CAMEL_RE.sub(" ", name)


def format_real(x: float) -> str:
    """Shortest decimal text that parses back to exactly ``x``.

    Integral values drop the trailing ".0" so 66.0 renders as "66", matching
    the clinical-text style the serializer targets.
    """
    x = float(x)
    if x == int(x) and abs(x) < 1e16:
        return str(int(x))
    return repr(x)


# ---------------------------------------------------------------------------
# Serializers
# ---------------------------------------------------------------------------


def serialize_canonical(window: WindowRecord, schema: FeatureSchema) -> str:
    """Render a window as canonical English sentences, one per observed feature.

    Features appear in schema order; features with no data in the window are
    omitted. An empty window renders as the empty string.
    """
    sentences: list[str] = []
    for spec in schema.features:
        if spec.kind == "continuous":
            obs = window.continuous_obs.get(spec.name)
            if not obs:
                continue
            name = display_name(spec.name, schema)
            parts = [f"{name} has value {format_real(obs[0][1])} in hour {format_real(obs[0][0])}"]
            for hour, value in obs[1:]:
                parts.append(f", value {format_real(value)} in hour {format_real(hour)}")
            sentences.append("".join(parts) + ".")
        else:
            hours = window.binary_events.get(spec.name)
            if not hours:
                continue
            name = display_name(spec.name, schema)
            hour_list = ", ".join(str(int(h)) for h in hours)
            sentences.append(f"{_BIN_PREFIX}{name} at hour {hour_list}.")
    return " ".join(sentences)


def serialize_template(
    window: WindowRecord,
    schema: FeatureSchema,
    groups: Mapping[str, str] | None = None,
) -> str:
    """Render a window as one terse line per event with a group prefix.

    ``groups`` maps feature name to its group label (e.g. "lab", "vital");
    binary features always get "bin". Without a mapping, continuous features
    default to "lab". Lines follow schema order, then time; raw feature names
    are used (vital_HeartRate, not "Heart Rate"). The exact per-event layout
    is this project's stand-in: "<group>_<Name> <value> hour <hour>".
    """
    lines: list[str] = []
    for spec in schema.features:
        if spec.kind == "binary":
            group = "bin"
            for hour in window.binary_events.get(spec.name, ()):
                lines.append(f"{group}_{spec.name} 1 hour {int(hour)}")
        else:
            group = (groups or {}).get(spec.name, "lab")
            for hour, value in window.continuous_obs.get(spec.name, ()):
                lines.append(f"{group}_{spec.name} {format_real(value)} hour {format_real(hour)}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


class ParseError(ValueError):
    """Raised on malformed canonical text; carries the byte offset."""

    def __init__(self, message: str, text: str, position: int):
        self.byte_offset = len(text[:position].encode("utf-8"))
        super().__init__(f"{message} at byte offset {self.byte_offset}")


@dataclass
class ParsedObservations:
    """Observation maps recovered from canonical text."""

    continuous_obs: dict[str, tuple[tuple[float, float], ...]] = field(default_factory=dict)
    binary_events: dict[str, tuple[int, ...]] = field(default_factory=dict)


def _reverse_names(schema: FeatureSchema) -> dict[str, str]:
    out: dict[str, str] = {}
    for spec in schema.features:
        shown = display_name(spec.name, schema)
        if shown in out:
            raise ValueError(f"display name {shown!r} is ambiguous in schema {schema.site_id!r}")
        out[shown] = spec.name
    return out


def _read_number(text: str, pos: int, what: str) -> tuple[float, int]:
    m = _NUM_RE.match(text, pos)
    if m is None:
        raise ParseError(f"expected {what}", text, pos)
    return float(m.group()), m.end()


def _expect(text: str, pos: int, literal: str) -> int:
    if not text.startswith(literal, pos):
        raise ParseError(f"expected {literal!r}", text, pos)
    return pos + len(literal)


def parse_canonical(text: str, schema: FeatureSchema) -> ParsedObservations:
    """Invert :func:`serialize_canonical`.

    Returns the observation maps keyed by schema feature names. Raises
    :class:`ParseError` with a byte offset on the first malformed span or on
    a display name the schema does not know. Display names must be injective
    within the schema for the inversion to be well defined.
    """
    names = _reverse_names(schema)
    out = ParsedObservations()
    pos = 0
    n = len(text)
    while pos < n:
        if text.startswith(_BIN_PREFIX, pos):
            pos += len(_BIN_PREFIX)
            sep = text.find(" at hour ", pos)
            if sep < 0:
                raise ParseError("expected ' at hour '", text, pos)
            shown = text[pos:sep]
            name = names.get(shown)
            if name is None:
                raise ParseError(f"unknown feature {shown!r}", text, pos)
            pos = sep + len(" at hour ")
            hours: list[int] = []
            while True:
                value, pos = _read_number(text, pos, "an event hour")
                if value != int(value):
                    raise ParseError("event hour must be an integer", text, pos)
                hours.append(int(value))
                if text.startswith(", ", pos):
                    pos += 2
                    continue
                pos = _expect(text, pos, ".")
                break
            if name in out.binary_events:
                raise ParseError(f"duplicate sentence for {shown!r}", text, pos)
            out.binary_events[name] = tuple(hours)
        else:
            sep = text.find(" has value ", pos)
            if sep < 0:
                raise ParseError("expected ' has value '", text, pos)
            shown = text[pos:sep]
            name = names.get(shown)
            if name is None:
                raise ParseError(f"unknown feature {shown!r}", text, pos)
            pos = sep + len(" has value ")
            obs: list[tuple[float, float]] = []
            while True:
                value, pos = _read_number(text, pos, "a value")
                pos = _expect(text, pos, " in hour ")
                hour, pos = _read_number(text, pos, "an hour")
                obs.append((hour, value))
                if text.startswith(", value ", pos):
                    pos += len(", value ")
                    continue
                pos = _expect(text, pos, ".")
                break
            if name in out.continuous_obs:
                raise ParseError(f"duplicate sentence for {shown!r}", text, pos)
            out.continuous_obs[name] = tuple(obs)
        if pos < n:
            pos = _expect(text, pos, " ")
            if pos == n:
                raise ParseError("trailing space after final sentence", text, pos - 1)
    return out
