"""Text embedding: pooling, normalization, and the two backends.

The mock backend is a deterministic signed hashing vectorizer: each token
maps to a one-hot +/-1 vector at a hashed coordinate, so two texts sharing
vocabulary land near each other without any learned weights. The remote
backend posts texts to an embedding endpoint and trusts its pooled vectors.
Everything downstream consumes a fixed-length float vector either way.
"""

from __future__ import annotations

import hashlib
import os
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import EmbeddingVector
from .summarize import API_KEY_ENV, BackendError
from .textize import tokenize

POOLING_STRATEGIES = ("mean", "cls", "last", "max")
NORMALIZE_MODES = ("l2", "none")

MIN_MOCK_DIM = 8
DEFAULT_DIM = 256


@dataclass(frozen=True)
class EmbedConfig:
    dim: int = DEFAULT_DIM
    pooling: str = "mean"
    normalize: str = "l2"

    def __post_init__(self) -> None:
        if self.dim <= 0:
            raise ValueError(f"embedding dim must be positive, got {self.dim}")
        if self.pooling not in POOLING_STRATEGIES:
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.normalize not in NORMALIZE_MODES:
            raise ValueError(f"unknown normalize mode {self.normalize!r}")


def hash64(salt: str, token: str) -> int:
    """Stable 64-bit hash of (salt, token), independent of process and platform."""
    h = hashlib.blake2b(digest_size=8)
    h.update(salt.encode("utf-8"))
    h.update(b"\x00")
    h.update(token.encode("utf-8"))
    return int.from_bytes(h.digest(), "big")


def mock_embed_tokens(text: str, dim: int, salt: str = "r2v") -> np.ndarray:
    """Per-token vectors for the mock backend, shape (n_tokens, dim).

    Token t becomes a vector that is zero except for +/-1 at coordinate
    hash64(salt, t) mod dim, with the sign taken from the hash's top bit.
    Requires dim >= 8; below that, collisions drown the signal entirely.
    """
    if dim < MIN_MOCK_DIM:
        raise ValueError(f"mock embedding dim must be >= {MIN_MOCK_DIM}, got {dim}")
    tokens = tokenize(text)
    out = np.zeros((len(tokens), dim), dtype=np.float64)
    seen: dict[str, tuple[int, float]] = {}
    for row, token in enumerate(tokens):
        hit = seen.get(token)
        if hit is None:
            value = hash64(salt, token)
            hit = (value % dim, -1.0 if value >> 63 else 1.0)
            seen[token] = hit
        out[row, hit[0]] = hit[1]
    return out


def pool(token_vectors: np.ndarray, strategy: str) -> np.ndarray:
    """Collapse (n_tokens, dim) to (dim,). Errors on an empty token axis."""
    if strategy not in POOLING_STRATEGIES:
        raise ValueError(f"unknown pooling {strategy!r}")
    if token_vectors.ndim != 2 or token_vectors.shape[0] == 0:
        raise ValueError("pooling needs at least one token vector")
    if strategy == "mean":
        return token_vectors.mean(axis=0)
    if strategy == "cls":
        return np.array(token_vectors[0], dtype=np.float64)
    if strategy == "last":
        return np.array(token_vectors[-1], dtype=np.float64)
    return token_vectors.max(axis=0)


def normalize_l2(vector: np.ndarray) -> np.ndarray:
    """Scale to unit L2 norm. An all-zero vector has no direction: error."""
    norm = float(np.linalg.norm(vector))
    if norm == 0.0:
        raise ValueError("cannot L2-normalize an all-zero vector")
    return vector / norm


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


@dataclass
class MockEmbedder:
    """Deterministic hashing embedder; the offline twin of a text encoder.

    A small per-instance memo keeps token hashing cheap on the long
    raw-serialization texts.
    """

    salt: str = "r2v"
    _memo: dict[str, tuple[int, float]] = field(default_factory=dict, repr=False)

    @property
    def backend_id(self) -> str:
        return f"mock-embedder:{self.salt}"

    def token_vectors(self, text: str, dim: int) -> np.ndarray:
        if dim < MIN_MOCK_DIM:
            raise ValueError(f"mock embedding dim must be >= {MIN_MOCK_DIM}, got {dim}")
        tokens = tokenize(text)
        out = np.zeros((len(tokens), dim), dtype=np.float64)
        for row, token in enumerate(tokens):
            hit = self._memo.get(token)
            if hit is None:
                value = hash64(self.salt, token)
                hit = (value % dim, -1.0 if value >> 63 else 1.0)
                self._memo[token] = hit
            out[row, hit[0]] = hit[1]
        return out

    def embed_batch(self, texts: Sequence[str], config: EmbedConfig) -> list[np.ndarray]:
        vectors = []
        for text in texts:
            pooled = pool(self.token_vectors(text, config.dim), config.pooling)
            vectors.append(pooled)
        return vectors


@dataclass
class RemoteEmbedder:
    """Embedding endpoint over HTTP.

    Sends {"model", "input": [texts]} and expects one float array per input
    under data[i].embedding. Returned vectors are already pooled by the
    service, so the pooling strategy must be "mean" (the service default);
    anything else has no effect remotely and is rejected to avoid silently
    lying about the config. Bearer token from R2V_API_KEY.
    """

    url: str
    model: str
    batch_size: int = 32
    retries: int = 3
    backoff_s: float = 0.5
    timeout_s: float = 60.0

    @property
    def backend_id(self) -> str:
        return f"remote:{self.model}"

    def _post(self, texts: Sequence[str]) -> list[np.ndarray]:
        import requests

        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(API_KEY_ENV)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        body = {"model": self.model, "input": list(texts)}

        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = requests.post(self.url, json=body, headers=headers, timeout=self.timeout_s)
                if resp.status_code == 429 or resp.status_code >= 500:
                    raise BackendError(f"HTTP {resp.status_code} from {self.url}")
                resp.raise_for_status()
                payload = resp.json()
                rows = payload["data"]
                if len(rows) != len(texts):
                    raise BackendError(
                        f"embedder returned {len(rows)} vectors for {len(texts)} inputs"
                    )
                return [np.asarray(r["embedding"], dtype=np.float64) for r in rows]
            except (requests.ConnectionError, requests.Timeout, BackendError) as e:
                last_error = e
                if attempt < self.retries:
                    time.sleep(self.backoff_s * (2**attempt))
            except (KeyError, IndexError, TypeError, ValueError) as e:
                raise BackendError(f"malformed response from {self.url}: {e}") from e
        raise BackendError(f"embedder failed after {self.retries + 1} attempts: {last_error}")

    def embed_batch(self, texts: Sequence[str], config: EmbedConfig) -> list[np.ndarray]:
        if config.pooling != "mean":
            raise ValueError("remote embedder vectors are pre-pooled; config must use mean pooling")
        out: list[np.ndarray] = []
        for start in range(0, len(texts), self.batch_size):
            for vec in self._post(texts[start : start + self.batch_size]):
                if vec.shape != (config.dim,):
                    raise BackendError(
                        f"embedder returned dim {vec.shape} but config expects ({config.dim},)"
                    )
                out.append(vec)
        return out


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


def embed_text(text: str, config: EmbedConfig, backend) -> EmbeddingVector:
    """Embed one non-empty text through pooling and normalization."""
    return embed_texts([text], config, backend)[0]


def embed_texts(texts: Sequence[str], config: EmbedConfig, backend) -> list[EmbeddingVector]:
    """Embed a batch of non-empty texts, preserving order."""
    for i, text in enumerate(texts):
        if not text:
            raise ValueError(f"cannot embed empty text (index {i})")
    pooled = backend.embed_batch(texts, config)
    out: list[EmbeddingVector] = []
    for vec in pooled:
        if config.normalize == "l2":
            vec = normalize_l2(vec)
        out.append(
            EmbeddingVector(
                values=vec,
                backend_id=backend.backend_id,
                pooling=config.pooling,
                normalize=config.normalize,
            )
        )
    return out
