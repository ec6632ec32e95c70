"""SPTQ tensor-archive format.

Layout: magic "SPTQ" | version u32 LE | header_len u64 LE | header JSON |
payload. The header maps tensor name -> {dtype, shape, byte_offset, byte_len};
offsets are relative to the payload start and 64-byte aligned. Archives are
canonical (sorted names, compact sorted-key JSON), so saving the same map
twice yields byte-identical files, and load(save(x)) is bitwise lossless.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import (
    ArchiveError,
    BadMagicError,
    DataError,
    DuplicateNameError,
    OverlappingRangeError,
    TruncatedPayloadError,
    VersionError,
)

MAGIC = b"SPTQ"
VERSION = 1
ALIGNMENT = 64

DTYPE_SIZE = {"f32": 4, "i8": 1, "i4": 1}
_NUMPY_DTYPE = {"f32": "<f4", "i8": "i1", "i4": "i1"}


@dataclass(frozen=True)
class Tensor:
    """Dtype-tagged dense array: f32, i8 (range ±127) or i4 (range ±7, one per byte)."""

    data: np.ndarray
    dtype: str = ""

    def __post_init__(self):
        dtype = self.dtype or _infer_dtype(self.data)
        if dtype not in DTYPE_SIZE:
            raise DataError(f"unsupported tensor dtype {dtype!r}")
        arr = np.asarray(self.data, dtype=_NUMPY_DTYPE[dtype])
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if dtype == "i8" and arr.size and (arr.min() < -127 or arr.max() > 127):
            raise DataError("i8 tensor values must lie in [-127, 127]")
        if dtype == "i4" and arr.size and (arr.min() < -7 or arr.max() > 7):
            raise DataError("i4 tensor values must lie in [-7, 7]")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "dtype", dtype)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def nbytes(self) -> int:
        return self.data.size * DTYPE_SIZE[self.dtype]


def _infer_dtype(arr: np.ndarray) -> str:
    arr = np.asarray(arr)
    if np.issubdtype(arr.dtype, np.floating):
        return "f32"
    if arr.dtype == np.int8:
        return "i8"
    raise DataError(f"cannot infer archive dtype for numpy dtype {arr.dtype}")


def as_tensor(x: "Tensor | np.ndarray") -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _align(n: int) -> int:
    return (n + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


def save_archive(tensors: Mapping[str, "Tensor | np.ndarray"], path: "str | Path") -> None:
    """Write tensors to an SPTQ archive; deterministic for identical input maps."""
    items: list[tuple[str, Tensor]] = []
    for name in sorted(tensors):
        if not name:
            raise ArchiveError("tensor names must be non-empty")
        items.append((name, as_tensor(tensors[name])))

    header: dict[str, dict] = {}
    offset = 0
    for name, tensor in items:
        header[name] = {
            "dtype": tensor.dtype,
            "shape": list(tensor.shape),
            "byte_offset": offset,
            "byte_len": tensor.nbytes,
        }
        offset = _align(offset + tensor.nbytes)

    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        pos = 0
        for name, tensor in items:
            rec = header[name]
            if rec["byte_offset"] > pos:
                fh.write(b"\x00" * (rec["byte_offset"] - pos))
                pos = rec["byte_offset"]
            fh.write(tensor.data.tobytes())
            pos += rec["byte_len"]


def load_archive(path: "str | Path") -> dict[str, Tensor]:
    """Read an SPTQ archive back into a name -> Tensor map (bitwise lossless)."""
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: not an SPTQ archive (bad magic)")
    if len(blob) < 16:
        raise TruncatedPayloadError(f"{path}: truncated before header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise VersionError(f"{path}: unsupported archive version {version} (expected {VERSION})")
    (header_len,) = struct.unpack_from("<Q", blob, 8)
    if 16 + header_len > len(blob):
        raise TruncatedPayloadError(f"{path}: header extends past end of file")

    def reject_dupes(pairs):
        out = {}
        for key, value in pairs:
            if key in out:
                raise DuplicateNameError(f"{path}: duplicate tensor name {key!r} in header")
            out[key] = value
        return out

    try:
        header = json.loads(blob[16 : 16 + header_len].decode("utf-8"), object_pairs_hook=reject_dupes)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"{path}: malformed header JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise ArchiveError(f"{path}: header must be a JSON object")

    payload = blob[16 + header_len :]
    ranges: list[tuple[int, int, str]] = []
    tensors: dict[str, Tensor] = {}
    for name, rec in header.items():
        try:
            dtype = rec["dtype"]
            shape = tuple(int(s) for s in rec["shape"])
            byte_offset = int(rec["byte_offset"])
            byte_len = int(rec["byte_len"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ArchiveError(f"{path}: malformed record for tensor {name!r}") from exc
        if dtype not in DTYPE_SIZE:
            raise ArchiveError(f"{path}: tensor {name!r} has unknown dtype {dtype!r}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if byte_len != count * DTYPE_SIZE[dtype]:
            raise ArchiveError(
                f"{path}: tensor {name!r} byte_len {byte_len} != shape {list(shape)} x {dtype}"
            )
        if byte_offset < 0 or byte_offset + byte_len > len(payload):
            raise TruncatedPayloadError(
                f"{path}: tensor {name!r} range [{byte_offset}, {byte_offset + byte_len}) "
                f"exceeds payload of {len(payload)} bytes"
            )
        ranges.append((byte_offset, byte_len, name))
        arr = np.frombuffer(payload, dtype=_NUMPY_DTYPE[dtype], count=count, offset=byte_offset)
        tensors[name] = Tensor(arr.reshape(shape).copy(), dtype)

    ranges.sort()
    for (off_a, len_a, name_a), (off_b, _, name_b) in zip(ranges, ranges[1:]):
        if off_a + len_a > off_b and len_a:
            raise OverlappingRangeError(
                f"{path}: tensors {name_a!r} and {name_b!r} have overlapping byte ranges"
            )
    return tensors
