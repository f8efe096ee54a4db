"""Window summarization: prompt templates, backends, and the summary cache.

A summarizer turns one window's serialized text into a shorter free-text
summary. The LLM stays frozen; all variation lives in the prompt template
(four kinds) and the backend. The mock backend is fully deterministic and
needs no network: it parses the canonical text back into observations and
emits a fixed per-feature digest, which keeps the whole pipeline runnable
and testable offline.

Summaries are cached content-addressed under a digest of
(backend id, prompt kind, input text), so identical requests are never
re-sent and reruns are byte-stable.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

from .core import Demographics, FeatureSchema, PROMPT_KINDS, Summary, WindowRecord
from .textize import count_tokens, display_name, format_real, parse_canonical, serialize_canonical

CACHE_DIR_ENV = "R2V_CACHE_DIR"
API_KEY_ENV = "R2V_API_KEY"

DEFAULT_TEMPERATURE = 0.0
DEFAULT_MAX_TOKENS = 512

TREND_DEADBAND = 1e-9

# Prompt templates, one per kind, used verbatim as the system message.
PROMPT_TEMPLATES: dict[str, str] = {
    "zero_shot": (
        "You are a clinical agent that analyze and then provide the most concise "
        "summarization on ICU time series data for forecasting."
    ),
    "cot": (
        "You are a healthcare agent that summarizes ICU patients' time series status "
        "for future time series forecasting. Analyze this step by step.\n"
        "1. Analyze the time series data to identify key trends.\n"
        "2. Based on the identified trends, determine potential clinical implications.\n"
        "3. Summarize the findings and suggest possible interventions.\n"
        "Summarize as many feature as possible starting from the most significant ones "
        "in concise words and only respond with your summarization."
    ),
    "icd": (
        "You are a clinical analysis agent. Summarize ICU time-series patient data for "
        "forecasting using this structure:\n"
        "- Trend — overall direction of vitals, labs, therapies, and organ support.\n"
        "- Seasonality — repeating cycles (e.g., circadian).\n"
        "- Irregularities — acute deviations or events.\n"
        "Map each diagnosis to its affected organ system (cardiac, respiratory, hepatic, "
        "renal, neurologic, etc.). For every system, assign a severity score from 1 "
        "(least affected) to 10 (most severe) based on data patterns and level of support "
        "required. Output only the summary in clear clinical prose, concluding with a "
        "semicolon-separated list of organ systems and scores (e.g., \"Cardiovascular 7/10; "
        "Respiratory 8/10; Hepatic 3/10\"). Do not explain your reasoning."
    ),
    "trend": (
        "Examine the data closely and describe the trend changes step by step over time. "
        "For example: from [start] to [midpoint], what happened? Then from [midpoint] to "
        "[end], what happened? After describing each phase, conclude with an overall "
        "summary in natural language. Summarize as many feature as possible starting from "
        "the most significant ones in concise words. Only include your description and "
        "summarization."
    ),
}


@dataclass(frozen=True)
class SummarizeRequest:
    """One chat-completion request: frozen decoding, system + user message."""

    system_prompt: str
    user_content: str
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int = DEFAULT_MAX_TOKENS


def render_prompt(kind: str, serialized_text: str) -> SummarizeRequest:
    """Build the request for one window: verbatim template + serialized text."""
    if kind not in PROMPT_KINDS:
        raise ValueError(f"unknown prompt kind {kind!r}; expected one of {PROMPT_KINDS}")
    return SummarizeRequest(system_prompt=PROMPT_TEMPLATES[kind], user_content=serialized_text)


# ---------------------------------------------------------------------------
# Mock summarizer
# ---------------------------------------------------------------------------


def _trend_word(first: float, last: float) -> str:
    delta = last - first
    if delta > TREND_DEADBAND:
        return "rising"
    if delta < -TREND_DEADBAND:
        return "falling"
    return "flat"


def mock_summarize(window: WindowRecord, schema: FeatureSchema) -> str:
    """Deterministic digest of a window, one sentence per observed feature.

    Continuous features get first/last/min/max and a trend word (deadband
    1e-9 on last minus first); binary features get their event count. Feature
    order and display names match the canonical serializer, so the digest is
    exactly what a very literal summarizer would say.
    """
    sentences: list[str] = []
    for spec in schema.features:
        name = display_name(spec.name, schema)
        if spec.kind == "continuous":
            obs = window.continuous_obs.get(spec.name)
            if not obs:
                continue
            values = [v for _, v in obs]
            first_h, first_v = obs[0]
            last_h, last_v = obs[-1]
            sentences.append(
                f"{name}: first {format_real(first_v)} at hour {format_real(first_h)}, "
                f"last {format_real(last_v)} at hour {format_real(last_h)}, "
                f"min {format_real(min(values))}, max {format_real(max(values))}, "
                f"trend {_trend_word(first_v, last_v)}."
            )
        else:
            hours = window.binary_events.get(spec.name)
            if not hours:
                continue
            sentences.append(f"{name} given {len(hours)} times.")
    return " ".join(sentences)


class SummarizerBackend(Protocol):
    backend_id: str

    def complete(self, request: SummarizeRequest) -> str: ...


@dataclass
class MockSummarizer:
    """Offline summarizer backend.

    Sees only what a real backend would see: the serialized text in the user
    message. It parses that text back into observations and renders the mock
    digest, ignoring the prompt kind by design.
    """

    schema: FeatureSchema
    backend_id: str = "mock-summarizer"

    def complete(self, request: SummarizeRequest) -> str:
        parsed = parse_canonical(request.user_content, self.schema)
        window = WindowRecord(
            stay_id="",
            site_id=self.schema.site_id,
            window_index=0,
            continuous_obs=parsed.continuous_obs,
            binary_events=parsed.binary_events,
            demographics=_MOCK_DEMOGRAPHICS,
        )
        return mock_summarize(window, self.schema)


# Placeholder demographics for the text-only reconstruction inside the mock.
_MOCK_DEMOGRAPHICS = Demographics(age=0.0, sex="M")


# ---------------------------------------------------------------------------
# Remote summarizer
# ---------------------------------------------------------------------------


class BackendError(RuntimeError):
    """A backend failed after exhausting retries (CLI exit code 3)."""


@dataclass
class RemoteSummarizer:
    """Chat-completion backend over HTTP.

    Sends {"model", "temperature", "max_tokens", "messages": [system, user]}
    and reads the first choice's message content. Retries transient failures
    (connection errors, HTTP 429/5xx) up to ``retries`` times with exponential
    backoff starting at ``backoff_s``. The bearer token comes from the
    R2V_API_KEY environment variable; it is never written to disk.
    """

    url: str
    model: str
    retries: int = 3
    backoff_s: float = 0.5
    timeout_s: float = 60.0

    @property
    def backend_id(self) -> str:
        return f"remote:{self.model}"

    def complete(self, request: SummarizeRequest) -> str:
        import requests

        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(API_KEY_ENV)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        body = {
            "model": self.model,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_content},
            ],
        }

        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = requests.post(self.url, json=body, headers=headers, timeout=self.timeout_s)
                if resp.status_code == 429 or resp.status_code >= 500:
                    raise BackendError(f"HTTP {resp.status_code} from {self.url}")
                resp.raise_for_status()
                payload = resp.json()
                return payload["choices"][0]["message"]["content"]
            except (requests.ConnectionError, requests.Timeout, BackendError) as e:
                last_error = e
                if attempt < self.retries:
                    time.sleep(self.backoff_s * (2**attempt))
            except (KeyError, IndexError, ValueError) as e:
                raise BackendError(f"malformed response from {self.url}: {e}") from e
        raise BackendError(f"summarizer failed after {self.retries + 1} attempts: {last_error}")


# ---------------------------------------------------------------------------
# Cache
# ---------------------------------------------------------------------------


def cache_key(backend_id: str, prompt_kind: str, text: str) -> str:
    """Content address: 64-hex digest of (backend id, prompt kind, input text)."""
    h = hashlib.sha256()
    for part in (backend_id, prompt_kind, text):
        data = part.encode("utf-8")
        h.update(len(data).to_bytes(8, "little"))
        h.update(data)
    return h.hexdigest()


def default_cache_dir() -> Path:
    env = os.environ.get(CACHE_DIR_ENV)
    if env:
        return Path(env)
    return Path.home() / ".cache" / "r2v"


class SummaryCache:
    """Two-level cache: in-process dict in front of one file per digest.

    Disk writes go through a temp file and an atomic rename, so a crashed or
    concurrent writer can never leave a torn entry behind.
    """

    def __init__(self, directory: Path | None = None):
        self.directory = Path(directory) if directory is not None else default_cache_dir()
        self._memory: dict[str, str] = {}
        self._lock = threading.Lock()

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, key: str) -> str | None:
        with self._lock:
            if key in self._memory:
                return self._memory[key]
        path = self._path(key)
        if not path.exists():
            return None
        text = json.loads(path.read_text(encoding="utf-8"))["text"]
        with self._lock:
            self._memory[key] = text
        return text

    def put(self, key: str, text: str) -> None:
        with self._lock:
            self._memory[key] = text
        self.directory.mkdir(parents=True, exist_ok=True)
        payload = json.dumps({"text": text}, ensure_ascii=False)
        fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                f.write(payload)
            os.replace(tmp, self._path(key))
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


def summarize_windows(
    windows: Sequence[WindowRecord],
    schema: FeatureSchema,
    prompt_kind: str,
    backend: SummarizerBackend,
    cache: SummaryCache | None = None,
    max_workers: int = 1,
    serialized_texts: Sequence[str] | None = None,
) -> list[Summary]:
    """Summarize each window, preserving input order.

    ``serialized_texts`` lets callers reuse texts they already rendered; by
    default each window is serialized canonically. ``cache=None`` disables
    caching entirely, which is right for the deterministic offline backend;
    pass a :class:`SummaryCache` for anything that talks to a network. Cache
    hits never reach the backend. ``max_workers`` bounds request parallelism.
    """
    if serialized_texts is None:
        serialized_texts = [serialize_canonical(w, schema) for w in windows]
    if len(serialized_texts) != len(windows):
        raise ValueError("serialized_texts must align with windows")

    def one(idx: int) -> Summary:
        text_in = serialized_texts[idx]
        out = None
        key = ""
        if cache is not None:
            key = cache_key(backend.backend_id, prompt_kind, text_in)
            out = cache.get(key)
        if out is None:
            out = backend.complete(render_prompt(prompt_kind, text_in))
            if cache is not None:
                cache.put(key, out)
        w = windows[idx]
        return Summary(
            stay_id=w.stay_id,
            window_index=w.window_index,
            text=out,
            prompt_kind=prompt_kind,
            backend_id=backend.backend_id,
            token_count=count_tokens(out),
        )

    if max_workers <= 1:
        return [one(i) for i in range(len(windows))]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(one, range(len(windows))))
