"""
File formats: line-delimited JSON, 8-bit PNG, compressed video arrays,
binary embedding matrices and the per-invocation artifact manifest.
"""

import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Iterable, List, Union

import cv2
import numpy as np

from ..errors import DomainError, ShapeError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

EMBEDDING_MAGIC = b"FEMB"
EMBEDDING_HEADER = struct.Struct("<4sQQ4s")
DTYPE_TAGS = {np.dtype(np.float32): b"f32\0", np.dtype(np.float64): b"f64\0"}


# ==================== JSONL ====================

def write_jsonl(path: PathLike, rows: Iterable[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")
    return path


def read_jsonl(path: PathLike) -> List[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise DomainError(f"{path}:{lineno}: {e}")
    return rows


def write_json(path: PathLike, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def read_json(path: PathLike):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DomainError(f"{path}: {e}")


# ==================== Images ====================

def to_uint8(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return image
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path: PathLike, image: np.ndarray) -> Path:
    """Write a [0, 1] float or uint8 image; 3-channel inputs are RGB."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = to_uint8(image)
    if data.ndim == 3:
        data = cv2.cvtColor(data, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), data):
        raise DomainError(f"could not write {path}")
    return path


def read_png(path: PathLike, color: bool = False) -> np.ndarray:
    """Read as float32 in [0, 1]; color=True returns RGB when the file has color."""
    flag = cv2.IMREAD_UNCHANGED if color else cv2.IMREAD_GRAYSCALE
    data = cv2.imread(str(path), flag)
    if data is None:
        raise DomainError(f"could not read image {path}")
    if data.ndim == 3:
        data = cv2.cvtColor(data[..., :3], cv2.COLOR_BGR2RGB)
    return data.astype(np.float32) / 255.0


def write_mask(path: PathLike, mask: np.ndarray) -> Path:
    return write_png(path, mask.astype(np.uint8) * 255)


def read_mask(path: PathLike) -> np.ndarray:
    return read_png(path) >= 0.5


# ==================== Videos ====================

def write_video(path: PathLike, frames: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(path, frames=to_uint8(frames))
    return path


def read_video(path: PathLike) -> np.ndarray:
    with np.load(path) as data:
        return data["frames"].astype(np.float32) / 255.0


# ==================== Embeddings ====================

def write_embeddings(path: PathLike, matrix: np.ndarray) -> Path:
    """Header (magic, N, d, dtype tag) then the row-major matrix."""
    if matrix.ndim != 2:
        raise ShapeError(f"embedding matrix must be 2-D, got shape {matrix.shape}")
    dtype = np.dtype(matrix.dtype)
    if dtype not in DTYPE_TAGS:
        matrix, dtype = matrix.astype(np.float32), np.dtype(np.float32)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, d = matrix.shape
    with open(path, "wb") as f:
        f.write(EMBEDDING_HEADER.pack(EMBEDDING_MAGIC, n, d, DTYPE_TAGS[dtype]))
        f.write(np.ascontiguousarray(matrix, dtype=dtype.newbyteorder("<")).tobytes())
    return path


def read_embeddings(path: PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < EMBEDDING_HEADER.size:
        raise DomainError(f"{path}: truncated embedding header")
    magic, n, d, tag = EMBEDDING_HEADER.unpack_from(raw)
    if magic != EMBEDDING_MAGIC:
        raise DomainError(f"{path}: not an embedding file")
    tags = {v: k for k, v in DTYPE_TAGS.items()}
    if tag not in tags:
        raise DomainError(f"{path}: unknown dtype tag {tag!r}")
    dtype = tags[tag].newbyteorder("<")
    body = raw[EMBEDDING_HEADER.size:]
    if len(body) != n * d * dtype.itemsize:
        raise DomainError(f"{path}: expected {n}x{d} values, file size disagrees")
    return np.frombuffer(body, dtype=dtype).reshape(n, d).astype(tags[tag])


# ==================== Artifacts ====================

def sha256_file(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_artifact_manifest(out_dir: PathLike, subcommand: str, paths: Iterable[PathLike]) -> Path:
    out = Path(out_dir)
    entries = []
    for p in sorted({Path(p) for p in paths}):
        rel = p.relative_to(out).as_posix() if p.is_relative_to(out) else p.as_posix()
        entries.append({"path": rel, "sha256": sha256_file(p), "bytes": p.stat().st_size})
    manifest = write_json(out / f"artifacts-{subcommand}.json", {"subcommand": subcommand, "artifacts": entries})
    logger.info(f"Wrote {len(entries)} artifact hashes to {manifest}")
    return manifest
