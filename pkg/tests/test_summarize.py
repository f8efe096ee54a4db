"""Summarization: prompt templates, the offline backend, cache, and HTTP client."""

from __future__ import annotations

import json
import os

import pytest
import requests

import record2vec.summarize as sz
from record2vec.core import Demographics, FeatureSchema, FeatureSpec, WindowRecord
from record2vec.summarize import (
    BackendError,
    MockSummarizer,
    PROMPT_TEMPLATES,
    RemoteSummarizer,
    SummaryCache,
    cache_key,
    default_cache_dir,
    mock_summarize,
    render_prompt,
    summarize_windows,
)
from record2vec.textize import count_tokens, serialize_canonical


def schema_of(*specs):
    return FeatureSchema(site_id="s", features=specs)


def window_of(schema, continuous=None, binary=None, index=0):
    return WindowRecord(
        stay_id="s-00000",
        site_id="s",
        window_index=index,
        continuous_obs=continuous or {},
        binary_events=binary or {},
        demographics=Demographics(age=50.0, sex="M"),
    )


STANDARD_SCHEMA = schema_of(
    FeatureSpec("HeartRate", "continuous"),
    FeatureSpec("Lactate", "continuous"),
    FeatureSpec("Vasopressors", "binary"),
)


def standard_window():
    return window_of(
        STANDARD_SCHEMA,
        continuous={
            "HeartRate": ((1.0, 88.0), (20.0, 95.0), (40.0, 104.0)),
            "Lactate": ((2.0, 3.1), (30.0, 2.0)),
        },
        binary={"Vasopressors": (5, 6, 7)},
    )


# ---------------------------------------------------------------------------
# Prompts
# ---------------------------------------------------------------------------


def test_four_prompt_templates_exist_and_differ():
    assert set(PROMPT_TEMPLATES) == {"zero_shot", "cot", "icd", "trend"}
    assert len(set(PROMPT_TEMPLATES.values())) == 4


def test_render_prompt_wires_template_and_text():
    req = render_prompt("icd", "some serialized window")
    assert req.system_prompt == PROMPT_TEMPLATES["icd"]
    assert req.user_content == "some serialized window"
    assert req.temperature == 0.0
    with pytest.raises(ValueError, match="unknown prompt kind"):
        render_prompt("few_shot", "text")


# ---------------------------------------------------------------------------
# Offline summarizer
# ---------------------------------------------------------------------------


def test_mock_summary_digest_shape():
    text = mock_summarize(standard_window(), STANDARD_SCHEMA)
    assert (
        "Heart Rate: first 88 at hour 1, last 104 at hour 40, min 88, max 104, "
        "trend rising." in text
    )
    assert "Lactate: first 3.1 at hour 2, last 2 at hour 30, min 2, max 3.1, trend falling." in text
    assert text.endswith("Vasopressors given 3 times.")


def test_mock_backend_reads_only_the_user_message():
    window = standard_window()
    serialized = serialize_canonical(window, STANDARD_SCHEMA)
    backend = MockSummarizer(schema=STANDARD_SCHEMA)
    out = backend.complete(render_prompt("zero_shot", serialized))
    assert out == mock_summarize(window, STANDARD_SCHEMA)
    # prompt kind varies, output does not: the mock is a frozen model
    assert out == backend.complete(render_prompt("trend", serialized))


def test_mock_summary_is_shorter_than_serialization():
    # the compression claim is about realistically dense windows, so sample hourly
    window = window_of(
        STANDARD_SCHEMA,
        continuous={
            "HeartRate": tuple((float(h), 80.0 + h) for h in range(48)),
            "Lactate": tuple((float(h), 2.0 + 0.01 * h) for h in range(0, 48, 4)),
        },
        binary={"Vasopressors": tuple(range(10, 20))},
    )
    serialized = serialize_canonical(window, STANDARD_SCHEMA)
    summary = mock_summarize(window, STANDARD_SCHEMA)
    assert count_tokens(summary) < count_tokens(serialized)


def test_summarize_windows_preserves_order_and_metadata():
    windows = [standard_window(), window_of(STANDARD_SCHEMA, binary={"Vasopressors": (1,)}, index=1)]
    out = summarize_windows(windows, STANDARD_SCHEMA, "zero_shot", MockSummarizer(STANDARD_SCHEMA))
    assert [s.window_index for s in out] == [0, 1]
    assert all(s.prompt_kind == "zero_shot" for s in out)
    assert all(s.backend_id == "mock-summarizer" for s in out)
    assert out[0].token_count == count_tokens(out[0].text)
    parallel = summarize_windows(
        windows, STANDARD_SCHEMA, "zero_shot", MockSummarizer(STANDARD_SCHEMA), max_workers=4
    )
    assert [s.text for s in parallel] == [s.text for s in out]


# ---------------------------------------------------------------------------
# Cache
# ---------------------------------------------------------------------------


class CountingBackend:
    backend_id = "counting"

    def __init__(self):
        self.calls = 0

    def complete(self, request):
        self.calls += 1
        return f"summary #{self.calls}"


def test_cache_prevents_repeat_backend_calls(tmp_path):
    windows = [standard_window()] * 3
    backend = CountingBackend()
    cache = SummaryCache(tmp_path)
    out = summarize_windows(windows, STANDARD_SCHEMA, "zero_shot", backend, cache=cache)
    assert backend.calls == 1
    assert [s.text for s in out] == ["summary #1"] * 3

    # a fresh cache instance over the same directory still hits disk
    backend2 = CountingBackend()
    again = summarize_windows(
        windows, STANDARD_SCHEMA, "zero_shot", backend2, cache=SummaryCache(tmp_path)
    )
    assert backend2.calls == 0
    assert [s.text for s in again] == ["summary #1"] * 3


def test_no_cache_means_no_files_and_no_memoization(tmp_path, monkeypatch):
    monkeypatch.setenv("R2V_CACHE_DIR", str(tmp_path / "should_stay_empty"))
    backend = CountingBackend()
    summarize_windows([standard_window()] * 2, STANDARD_SCHEMA, "zero_shot", backend, cache=None)
    assert backend.calls == 2
    assert not (tmp_path / "should_stay_empty").exists()


def test_cache_key_separates_all_parts():
    keys = {
        cache_key("b", "zero_shot", "t"),
        cache_key("b", "cot", "t"),
        cache_key("c", "zero_shot", "t"),
        cache_key("b", "zero_shot", "u"),
        # length prefixing keeps concatenation boundaries unambiguous
        cache_key("bz", "ero_shot", "t"),
    }
    assert len(keys) == 5


def test_default_cache_dir_honors_environment(monkeypatch):
    monkeypatch.setenv("R2V_CACHE_DIR", "/tmp/r2v-test-cache")
    assert str(default_cache_dir()) == "/tmp/r2v-test-cache"
    monkeypatch.delenv("R2V_CACHE_DIR")
    assert default_cache_dir().name == "r2v"


# ---------------------------------------------------------------------------
# HTTP backend
# ---------------------------------------------------------------------------


class FakeResponse:
    def __init__(self, status_code=200, payload=None):
        self.status_code = status_code
        self._payload = payload if payload is not None else {}

    def raise_for_status(self):
        if self.status_code >= 400:
            raise requests.HTTPError(f"HTTP {self.status_code}")

    def json(self):
        return self._payload


def completion_payload(text):
    return {"choices": [{"message": {"content": text}}]}


def test_remote_summarizer_success(monkeypatch):
    seen = {}

    def fake_post(url, json=None, headers=None, timeout=None):
        seen.update(url=url, body=json, headers=headers)
        return FakeResponse(200, completion_payload("the summary"))

    monkeypatch.setattr(requests, "post", fake_post)
    monkeypatch.setenv("R2V_API_KEY", "secret-token")
    backend = RemoteSummarizer(url="https://api.example/v1/chat", model="frozen-8b")
    out = backend.complete(render_prompt("cot", "serialized text"))
    assert out == "the summary"
    assert seen["url"] == "https://api.example/v1/chat"
    assert seen["headers"]["Authorization"] == "Bearer secret-token"
    assert seen["body"]["model"] == "frozen-8b"
    assert seen["body"]["messages"][0]["role"] == "system"
    assert seen["body"]["messages"][1]["content"] == "serialized text"


def test_remote_summarizer_retries_transient_failures(monkeypatch):
    calls = {"n": 0}

    def flaky_post(url, **kwargs):
        calls["n"] += 1
        if calls["n"] < 3:
            return FakeResponse(429)
        return FakeResponse(200, completion_payload("recovered"))

    monkeypatch.setattr(requests, "post", flaky_post)
    monkeypatch.setattr(sz.time, "sleep", lambda s: None)
    backend = RemoteSummarizer(url="http://x", model="m", retries=3)
    assert backend.complete(render_prompt("zero_shot", "t")) == "recovered"
    assert calls["n"] == 3


def test_remote_summarizer_exhausts_retries(monkeypatch):
    monkeypatch.setattr(requests, "post", lambda url, **kw: FakeResponse(503))
    monkeypatch.setattr(sz.time, "sleep", lambda s: None)
    backend = RemoteSummarizer(url="http://x", model="m", retries=2)
    with pytest.raises(BackendError, match="after 3 attempts"):
        backend.complete(render_prompt("zero_shot", "t"))


def test_remote_summarizer_rejects_malformed_payload(monkeypatch):
    monkeypatch.setattr(requests, "post", lambda url, **kw: FakeResponse(200, {"choices": []}))
    backend = RemoteSummarizer(url="http://x", model="m")
    with pytest.raises(BackendError, match="malformed response"):
        backend.complete(render_prompt("zero_shot", "t"))
