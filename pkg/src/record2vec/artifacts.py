"""On-disk artifact formats: hashed configs, JSONL, packed matrices, checkpoints.

Every artifact is written atomically (temp file + rename) and embeds the
sha256 digest of the run configuration that produced it, so a stage can
refuse to consume inputs built under a different config. All binary payloads
are little-endian with fixed-width headers; all JSON is canonical (sorted
keys, compact separators), which makes reruns byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

FORMAT_VERSION = 1

MAGIC_EMBEDDINGS = b"R2VE"
MAGIC_GRIDS = b"R2VG"
MAGIC_CHECKPOINT = b"R2VH"

_MATRIX_MAGIC = {"embeddings": MAGIC_EMBEDDINGS, "grids": MAGIC_GRIDS}


# ---------------------------------------------------------------------------
# Canonical JSON, digests, seeds
# ---------------------------------------------------------------------------


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_digest(config: Mapping[str, Any]) -> str:
    """sha256 over the canonical JSON form of a config mapping."""
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def stage_seed(root_seed: int, stage: str) -> int:
    """Deterministic per-stage seed derived from the run's root seed."""
    digest = hashlib.blake2b(f"{root_seed}:{stage}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1  # keep it a positive int64


# ---------------------------------------------------------------------------
# Atomic writes
# ---------------------------------------------------------------------------


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# JSONL with a digest header line
# ---------------------------------------------------------------------------


def write_jsonl(
    path: str | Path,
    records: Sequence[Mapping[str, Any]],
    kind: str,
    digest: str,
    extra_header: Mapping[str, Any] | None = None,
) -> None:
    """Write a header line then one canonical-JSON record per line."""
    header: dict[str, Any] = {
        "kind": kind,
        "version": FORMAT_VERSION,
        "config_digest": digest,
        "count": len(records),
    }
    if extra_header:
        header.update(extra_header)
    lines = [canonical_json(header)]
    lines.extend(canonical_json(r) for r in records)
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_jsonl(
    path: str | Path, kind: str | None = None
) -> tuple[dict[str, Any], list[dict[str, Any]]]:
    """Read (header, records); verify the kind and the record count."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line for line in fh.read().split("\n") if line]
    if not lines:
        raise ValueError(f"{path}: empty artifact")
    header = json.loads(lines[0])
    if not isinstance(header, dict) or "kind" not in header:
        raise ValueError(f"{path}: missing artifact header")
    if kind is not None and header["kind"] != kind:
        raise ValueError(f"{path}: expected kind {kind!r}, found {header['kind']!r}")
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {header.get('version')!r}")
    records = [json.loads(line) for line in lines[1:]]
    if len(records) != header.get("count"):
        raise ValueError(
            f"{path}: header promises {header.get('count')} records, found {len(records)}"
        )
    return header, records


# ---------------------------------------------------------------------------
# Packed float32 matrices (embeddings, flattened grids)
# ---------------------------------------------------------------------------


def matrix_sidecar_path(path: str | Path) -> Path:
    return Path(str(path) + ".idx.jsonl")


def write_matrix(
    path: str | Path,
    matrix: np.ndarray,
    kind: str,
    row_index: Sequence[Mapping[str, Any]],
    digest: str,
    extra_header: Mapping[str, Any] | None = None,
) -> None:
    """Pack a (rows, dims) float32 matrix plus a JSONL row-identity sidecar.

    Layout: magic (4 bytes), version (u16), dims (u32), rows (u64), then
    rows*dims little-endian float32 values in row-major order.
    """
    if kind not in _MATRIX_MAGIC:
        raise ValueError(f"unknown matrix kind {kind!r}")
    m = np.ascontiguousarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise ValueError(f"matrix must be 2-D, got shape {m.shape}")
    rows, dims = m.shape
    if len(row_index) != rows:
        raise ValueError(f"{rows} rows but {len(row_index)} index records")

    header = _MATRIX_MAGIC[kind] + struct.pack("<HIQ", FORMAT_VERSION, dims, rows)
    atomic_write_bytes(path, header + m.tobytes())
    write_jsonl(
        matrix_sidecar_path(path),
        row_index,
        kind=f"{kind}_index",
        digest=digest,
        extra_header=extra_header,
    )


def read_matrix(
    path: str | Path, kind: str
) -> tuple[np.ndarray, dict[str, Any], list[dict[str, Any]]]:
    """Read (matrix, sidecar header, sidecar records) and verify sizes."""
    if kind not in _MATRIX_MAGIC:
        raise ValueError(f"unknown matrix kind {kind!r}")
    magic = _MATRIX_MAGIC[kind]
    raw = Path(path).read_bytes()
    if len(raw) < 18:
        raise ValueError(f"{path}: truncated header")
    if raw[:4] != magic:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    version, dims, rows = struct.unpack("<HIQ", raw[4:18])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    expected = 18 + rows * dims * 4
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    matrix = np.frombuffer(raw[18:], dtype="<f4").reshape(rows, dims).astype(np.float32)
    header, records = read_jsonl(matrix_sidecar_path(path), kind=f"{kind}_index")
    if len(records) != rows:
        raise ValueError(f"{path}: {rows} rows but {len(records)} sidecar records")
    return matrix, header, records


# ---------------------------------------------------------------------------
# Head checkpoints
# ---------------------------------------------------------------------------


def checkpoint_meta_path(path: str | Path) -> Path:
    return Path(str(path) + ".meta.json")


def write_checkpoint(
    path: str | Path,
    params: Mapping[str, np.ndarray],
    meta: Mapping[str, Any],
    digest: str,
) -> None:
    """Save named float64 arrays plus a JSON sidecar describing the head.

    Layout: magic, version (u16), count (u32), then per array: name length
    (u16), name bytes, ndim (u8), each dim (u32), little-endian float64 data.
    """
    chunks = [MAGIC_CHECKPOINT, struct.pack("<HI", FORMAT_VERSION, len(params))]
    for name, arr in params.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<B", a.ndim))
        for d in a.shape:
            chunks.append(struct.pack("<I", d))
        chunks.append(a.tobytes())
    atomic_write_bytes(path, b"".join(chunks))
    sidecar = {"kind": "checkpoint_meta", "version": FORMAT_VERSION, "config_digest": digest}
    sidecar.update(meta)
    atomic_write_text(checkpoint_meta_path(path), canonical_json(sidecar) + "\n")


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC_CHECKPOINT:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    version, count = struct.unpack("<HI", raw[4:10])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    params: dict[str, np.ndarray] = {}
    offset = 10
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", raw, offset)
        offset += 1
        shape = []
        for _ in range(ndim):
            (d,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            shape.append(d)
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(raw, dtype="<f8", count=n, offset=offset)
        offset += n * 8
        params[name] = data.reshape(shape).astype(np.float64)
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")

    meta_raw = checkpoint_meta_path(path).read_text(encoding="utf-8")
    meta = json.loads(meta_raw)
    if meta.get("kind") != "checkpoint_meta":
        raise ValueError(f"{path}: bad checkpoint sidecar")
    return params, meta


# ---------------------------------------------------------------------------
# Grid flattening
# ---------------------------------------------------------------------------


def flatten_grid(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-major values then mask, as one flat float vector (length 2*D*T)."""
    if values.shape != mask.shape:
        raise ValueError("values and mask must share a shape")
    return np.concatenate([values.ravel(), mask.ravel()])


def unflatten_grid(flat: np.ndarray, n_features: int, t_hours: int) -> tuple[np.ndarray, np.ndarray]:
    expected = 2 * n_features * t_hours
    if flat.shape != (expected,):
        raise ValueError(f"expected {expected} cells, got {flat.shape}")
    half = n_features * t_hours
    values = flat[:half].reshape(n_features, t_hours)
    mask = flat[half:].reshape(n_features, t_hours)
    return values, mask
