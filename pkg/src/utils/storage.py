"""
File formats used across the pipeline.

    DMF1  acoustic feature matrix        magic, u32 T_a, u32 160, f32[T_a*160]
    DMC1  named tensors (checkpoints)    magic, u32 version, u32 count, entries
    DMS1  pseudo-parallel store          magic, u32 k, u32 count, entries

All integers and floats are little-endian; floats are IEEE-754 32-bit,
row-major. JSON/JSONL helpers and the metrics log live here as well.
"""

import json
import struct
import zlib
from pathlib import Path
from typing import Any, Callable, Iterable

import numpy as np
import pandas as pd

from src.config import AUDIO_FEATURE_DIM
from src.errors import FormatError

FEATURE_MAGIC = b"DMF1"
CHECKPOINT_MAGIC = b"DMC1"
STORE_MAGIC = b"DMS1"
CHECKPOINT_VERSION = 1

_F32 = np.dtype("<f4")


class _Reader:
    def __init__(self, path: Path):
        self.path = path
        try:
            self.buf = path.read_bytes()
        except OSError as exc:
            raise FormatError(f"cannot read {path}: {exc}") from exc
        self.pos = 0

    def take(self, fmt: str) -> tuple:
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise FormatError(f"{self.path}: truncated at byte {self.pos}")
        values = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return values

    def floats(self, shape: tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        end = self.pos + 4 * count
        if end > len(self.buf):
            raise FormatError(f"{self.path}: truncated payload, expected {count} floats")
        arr = np.frombuffer(self.buf, dtype=_F32, count=count, offset=self.pos).astype(np.float32)
        self.pos = end
        return arr.reshape(shape)

    def magic(self, expected: bytes) -> None:
        (found,) = self.take("4s")
        if found != expected:
            raise FormatError(f"{self.path}: bad magic {found!r}, expected {expected!r}")

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{self.path}: {len(self.buf) - self.pos} trailing bytes")


def _f32_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype=_F32).tobytes()


def _write_atomic(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)


# ---------------------------------------------------------------------------
# DMF1
# ---------------------------------------------------------------------------

def write_features(path: str | Path, features: np.ndarray) -> None:
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[1] != AUDIO_FEATURE_DIM:
        raise FormatError(f"feature matrix must be T x {AUDIO_FEATURE_DIM}, got {features.shape}")
    header = FEATURE_MAGIC + struct.pack("<II", features.shape[0], features.shape[1])
    _write_atomic(Path(path), header + _f32_bytes(features))


def read_features(path: str | Path) -> np.ndarray:
    reader = _Reader(Path(path))
    reader.magic(FEATURE_MAGIC)
    frames, width = reader.take("<II")
    if width != AUDIO_FEATURE_DIM:
        raise FormatError(f"{path}: feature width {width}, expected {AUDIO_FEATURE_DIM}")
    features = reader.floats((frames, width))
    reader.done()
    return features


# ---------------------------------------------------------------------------
# DMC1
# ---------------------------------------------------------------------------

def write_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Write named tensors sorted lexicographically by name."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(_f32_bytes(arr))
    _write_atomic(Path(path), b"".join(parts))


def read_tensors(path: str | Path) -> dict[str, np.ndarray]:
    reader = _Reader(Path(path))
    reader.magic(CHECKPOINT_MAGIC)
    version, count = reader.take("<II")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.take("<H")
        (raw,) = reader.take(f"{name_len}s")
        (rank,) = reader.take("<B")
        shape = reader.take(f"<{rank}I")
        tensors[raw.decode("utf-8")] = reader.floats(tuple(shape))
    reader.done()
    return tensors


# ---------------------------------------------------------------------------
# DMS1
# ---------------------------------------------------------------------------

def write_store(path: str | Path, iteration: int, entries: Iterable[tuple[int, int, np.ndarray]]) -> None:
    """Entries are (example id, modality tag, matrix); each carries a CRC32 of its payload."""
    entries = list(entries)
    parts = [STORE_MAGIC, struct.pack("<II", iteration, len(entries))]
    for example_id, tag, values in entries:
        payload = _f32_bytes(values)
        parts.append(struct.pack("<QBII", example_id, tag, *values.shape))
        parts.append(struct.pack("<I", zlib.crc32(payload)))
        parts.append(payload)
    _write_atomic(Path(path), b"".join(parts))


def read_store(path: str | Path) -> tuple[int, list[tuple[int, int, np.ndarray]]]:
    reader = _Reader(Path(path))
    reader.magic(STORE_MAGIC)
    iteration, count = reader.take("<II")
    entries = []
    for _ in range(count):
        example_id, tag, rows, cols = reader.take("<QBII")
        (checksum,) = reader.take("<I")
        values = reader.floats((rows, cols))
        if zlib.crc32(_f32_bytes(values)) != checksum:
            raise FormatError(f"{path}: checksum mismatch for example {example_id}")
        entries.append((example_id, tag, values))
    reader.done()
    return iteration, entries


# ---------------------------------------------------------------------------
# JSON / JSONL
# ---------------------------------------------------------------------------

def write_json(path: str | Path, data: Any) -> None:
    _write_atomic(Path(path), (json.dumps(data, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def read_json(path: str | Path) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path} is not valid JSON: {exc}") from exc


class JsonlWriter:
    """Append-only JSONL file with sorted keys, so identical runs give identical bytes."""

    def __init__(self, path: str | Path, append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not append:
            self.path.write_text("")

    def write(self, record: dict[str, Any]) -> None:
        with self.path.open("a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def truncate(self, keep: Callable[[dict[str, Any]], bool]) -> int:
        """Rewrite the file with only the records `keep` accepts; returns the number dropped.
        A torn last line (a crash mid-write) is dropped too."""
        if not self.path.exists():
            return 0
        lines = [line for line in self.path.read_text().splitlines() if line.strip()]
        kept = []
        for line in lines:
            try:
                record = json.loads(line)
            except json.JSONDecodeError:
                continue
            if keep(record):
                kept.append(line)
        if len(kept) != len(lines):
            _write_atomic(self.path, "".join(line + "\n" for line in kept).encode("utf-8"))
        return len(lines) - len(kept)


def load_metrics(path: str | Path) -> pd.DataFrame:
    """Read a metrics JSONL file into a DataFrame (one row per record)."""
    try:
        return pd.read_json(path, lines=True)
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot load metrics from {path}: {exc}") from exc


def smoothed(series: pd.Series, window: int = 50) -> pd.Series:
    return series.rolling(window, min_periods=1).mean()
