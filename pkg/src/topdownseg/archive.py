"""Binary tensor archive used for encoder/decoder weights and mined features.

Layout (little-endian throughout):

    bytes 0..3   magic b"TFGU"
    u32          format version (currently 1)
    u32          tensor count
    per tensor:  u16 name length, utf-8 name, u8 dtype code, u8 ndim,
                 u32 * ndim dims, u64 payload offset
    payload      raw tensor bytes, offsets relative to payload start

Tensors are written in sorted-name order so identical content produces
identical bytes regardless of insertion order.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"TFGU"
VERSION = 1

_DTYPE_CODES = {"f32": 0, "f16": 1}
_CODE_TO_NUMPY = {0: np.dtype("<f4"), 1: np.dtype("<f2")}
_NUMPY_TO_CODE = {np.dtype("float32"): 0, np.dtype("float16"): 1}


class ArchiveError(Exception):
    """Malformed or inconsistent archive."""


class ArchiveFormatError(ArchiveError):
    """Bad magic, unsupported version, or corrupt table."""


class ShapeMismatchError(ArchiveError):
    """A named tensor's shape disagrees with what the caller expects."""


def save_archive(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write ``tensors`` to ``path``.

    Only float32 and float16 arrays are accepted; anything else must be
    converted (or decomposed, for integer metadata) by the caller. Names
    must be unique non-empty strings.
    """
    items = []
    seen: set[str] = set()
    for name in sorted(tensors):
        if not name:
            raise ArchiveError("tensor name must be non-empty")
        if name in seen:
            raise ArchiveError(f"duplicate tensor name {name!r}")
        seen.add(name)
        arr = np.asarray(tensors[name])
        if arr.dtype not in _NUMPY_TO_CODE:
            raise ArchiveError(
                f"tensor {name!r} has dtype {arr.dtype}; only float32/float16 are stored"
            )
        items.append((name, arr))

    table = bytearray()
    payload = bytearray()
    for name, arr in items:
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ArchiveError(f"tensor name too long: {name[:32]!r}...")
        code = _NUMPY_TO_CODE[arr.dtype]
        offset = len(payload)
        # tobytes always emits C order; astype pins little-endian byte order.
        payload += arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        table += struct.pack("<H", len(encoded))
        table += encoded
        table += struct.pack("<BB", code, arr.ndim)
        for dim in arr.shape:
            table += struct.pack("<I", dim)
        table += struct.pack("<Q", offset)

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(items)))
        fh.write(bytes(table))
        fh.write(bytes(payload))


def load_archive(path: str | Path) -> dict[str, np.ndarray]:
    """Read an archive back into a name -> array dict.

    Raises ArchiveFormatError on bad magic/version, truncated tables,
    overlapping or out-of-bounds payload ranges, or duplicate names.
    """
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise ArchiveFormatError(f"{path}: file too short for header")
    if blob[:4] != MAGIC:
        raise ArchiveFormatError(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ArchiveFormatError(f"{path}: unsupported version {version}")

    pos = 12
    entries = []
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + name_len].decode("utf-8")
            pos += name_len
            code, ndim = struct.unpack_from("<BB", blob, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", blob, pos) if ndim else ()
            pos += 4 * ndim
            (offset,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
        except struct.error as exc:
            raise ArchiveFormatError(f"{path}: truncated tensor table") from exc
        if code not in _CODE_TO_NUMPY:
            raise ArchiveFormatError(f"{path}: unknown dtype code {code} for {name!r}")
        entries.append((name, code, shape, offset))

    payload_start = pos
    payload_size = len(blob) - payload_start
    out: dict[str, np.ndarray] = {}
    ranges: list[tuple[int, int, str]] = []
    for name, code, shape, offset in entries:
        if name in out:
            raise ArchiveFormatError(f"{path}: duplicate tensor name {name!r}")
        dtype = _CODE_TO_NUMPY[code]
        nelem = 1
        for dim in shape:
            nelem *= dim
        nbytes = nelem * dtype.itemsize
        end = offset + nbytes
        if offset < 0 or end > payload_size:
            raise ArchiveFormatError(
                f"{path}: tensor {name!r} payload [{offset}, {end}) exceeds file"
            )
        ranges.append((offset, end, name))
        raw = blob[payload_start + offset : payload_start + end]
        out[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()

    ranges.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(ranges, ranges[1:]):
        if s1 < e0:
            raise ArchiveFormatError(
                f"{path}: tensors {n0!r} and {n1!r} overlap in payload"
            )
    return out


def int_to_f32_words(value: int) -> np.ndarray:
    """Encode a non-negative int (< 2**64) as four float32 16-bit words.

    Each word is < 65536 and therefore exactly representable, keeping the
    archive's f32-only table lossless for seeds and counters.
    """
    if value < 0 or value >= 1 << 64:
        raise ArchiveError(f"cannot encode {value} as 16-bit words")
    words = [(value >> shift) & 0xFFFF for shift in (0, 16, 32, 48)]
    return np.asarray(words, dtype=np.float32)


def f32_words_to_int(words: np.ndarray) -> int:
    arr = np.asarray(words)
    if arr.shape != (4,):
        raise ArchiveError(f"expected 4 words, got shape {arr.shape}")
    value = 0
    for i, w in enumerate(arr.astype(np.int64)):
        if w < 0 or w > 0xFFFF:
            raise ArchiveError(f"word {i} out of range: {w}")
        value |= int(w) << (16 * i)
    return value
