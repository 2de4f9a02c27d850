import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from topdownseg.archive import (
    MAGIC,
    ArchiveError,
    ArchiveFormatError,
    f32_words_to_int,
    int_to_f32_words,
    load_archive,
    save_archive,
)


def test_round_trip_bit_exact(tmp_path, rng):
    tensors = {
        "weights.a": rng.standard_normal((3, 5)).astype(np.float32),
        "weights.b": rng.standard_normal((7,)).astype(np.float16),
        "scalar": np.float32(3.25).reshape(()),
        "empty": np.zeros((0, 4), dtype=np.float32),
    }
    path = tmp_path / "t.tfgu"
    save_archive(path, tensors)
    loaded = load_archive(path)
    assert set(loaded) == set(tensors)
    for name, arr in tensors.items():
        assert loaded[name].dtype == arr.dtype
        assert loaded[name].shape == arr.shape
        assert loaded[name].tobytes() == arr.tobytes()


def test_bytes_independent_of_insertion_order(tmp_path, rng):
    a = rng.standard_normal((4, 4)).astype(np.float32)
    b = rng.standard_normal((2,)).astype(np.float16)
    p1, p2 = tmp_path / "one.tfgu", tmp_path / "two.tfgu"
    save_archive(p1, {"alpha": a, "beta": b})
    save_archive(p2, {"beta": b, "alpha": a})
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.tfgu"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ArchiveFormatError):
        load_archive(path)


def test_bad_version_rejected(tmp_path):
    path = tmp_path / "v9.tfgu"
    path.write_bytes(MAGIC + struct.pack("<II", 9, 0))
    with pytest.raises(ArchiveFormatError):
        load_archive(path)


def test_truncated_table_rejected(tmp_path):
    path = tmp_path / "trunc.tfgu"
    # Claims one tensor but the table is cut off mid-entry.
    path.write_bytes(MAGIC + struct.pack("<II", 1, 1) + struct.pack("<H", 4) + b"ab")
    with pytest.raises(ArchiveFormatError):
        load_archive(path)


def test_out_of_bounds_payload_rejected(tmp_path):
    path = tmp_path / "oob.tfgu"
    save_archive(path, {"x": np.zeros(4, dtype=np.float32)})
    blob = bytearray(path.read_bytes())
    # Entry layout: magic(4) ver(4) count(4) name_len(2) name(1) code(1)
    # ndim(1) dim(4) offset(8). Patch the offset to reach past the payload.
    off_pos = 4 + 4 + 4 + 2 + 1 + 1 + 1 + 4
    blob[off_pos : off_pos + 8] = struct.pack("<Q", 8)
    path.write_bytes(bytes(blob))
    with pytest.raises(ArchiveFormatError):
        load_archive(path)


def test_overlapping_payload_rejected(tmp_path):
    path = tmp_path / "ovl.tfgu"
    save_archive(path, {"a": np.zeros(4, dtype=np.float32), "b": np.ones(4, dtype=np.float32)})
    blob = bytearray(path.read_bytes())
    # Second entry's offset follows the first entry (name "a", 1 dim).
    entry0 = 2 + 1 + 1 + 1 + 4 + 8
    off_pos = 12 + entry0 + 2 + 1 + 1 + 1 + 4
    blob[off_pos : off_pos + 8] = struct.pack("<Q", 8)
    path.write_bytes(bytes(blob))
    with pytest.raises(ArchiveFormatError):
        load_archive(path)


def test_non_float_dtype_rejected(tmp_path):
    with pytest.raises(ArchiveError):
        save_archive(tmp_path / "i.tfgu", {"x": np.zeros(3, dtype=np.int32)})


def test_empty_name_rejected(tmp_path):
    with pytest.raises(ArchiveError):
        save_archive(tmp_path / "e.tfgu", {"": np.zeros(3, dtype=np.float32)})


def test_seed_word_encoding_round_trip():
    for value in (0, 1, 12345, 2**24 + 7, 2**63 + 11, 2**64 - 1):
        words = int_to_f32_words(value)
        assert words.dtype == np.float32
        assert f32_words_to_int(words) == value


@given(st.integers(min_value=0, max_value=2**64 - 1))
def test_seed_word_encoding_property(value):
    assert f32_words_to_int(int_to_f32_words(value)) == value


def test_seed_word_encoding_range_checks():
    with pytest.raises(ArchiveError):
        int_to_f32_words(-1)
    with pytest.raises(ArchiveError):
        int_to_f32_words(1 << 64)
    with pytest.raises(ArchiveError):
        f32_words_to_int(np.array([0.0, 0.0], dtype=np.float32))
