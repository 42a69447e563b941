"""Container format: nibble packing, round trips, validation, atomicity."""

import json
import os

import numpy as np
import pytest

from deskinfer.container import (
    ALIGNMENT,
    MAGIC,
    FormatError,
    QuantizedTensor,
    ValidationError,
    atomic_write,
    load_tensors,
    pack_nibbles,
    save_tensors,
    unpack_nibbles,
)


def _random_qt(rng, rows, cols, group_size, bits=4):
    n_groups = -(-cols // group_size)
    return QuantizedTensor(
        codes=rng.integers(0, 1 << bits, size=(rows, cols)).astype(np.uint8),
        scales=rng.uniform(0.01, 1.0, size=(rows, n_groups)).astype(np.float32),
        zeros=rng.integers(0, (1 << bits) - 1, size=(rows, n_groups)).astype(np.float32),
        group_size=group_size,
        bits=bits,
    )


def test_pack_nibbles_low_nibble_first():
    # Hand-packed oracle: byte k holds code 2k in its low nibble, code 2k+1 high.
    codes = np.array([[0x1, 0x2, 0x3, 0x4]], dtype=np.uint8)
    assert pack_nibbles(codes, group_size=4) == bytes([0x21, 0x43])


def test_pack_nibbles_pads_each_group_run_to_even():
    # Odd-width groups pad independently: [a] -> one byte with high nibble 0.
    codes = np.array([[0x7, 0x5, 0x3]], dtype=np.uint8)
    packed = pack_nibbles(codes, group_size=2)
    assert packed == bytes([0x57, 0x03])


def test_nibble_round_trip_random_shapes():
    rng = np.random.default_rng(0)
    for trial in range(50):
        rows = int(rng.integers(1, 9))
        cols = int(rng.integers(1, 33))
        group = int(rng.integers(1, cols + 1))
        codes = rng.integers(0, 16, size=(rows, cols)).astype(np.uint8)
        back = unpack_nibbles(pack_nibbles(codes, group), rows, cols, group)
        assert np.array_equal(back, codes), (trial, rows, cols, group)


def test_unpack_rejects_wrong_length():
    codes = np.zeros((2, 4), dtype=np.uint8)
    raw = pack_nibbles(codes, 4)
    with pytest.raises(ValidationError):
        unpack_nibbles(raw + b"\x00", 2, 4, 4)


def test_float_tensor_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {
        "a.weight": rng.normal(size=(5, 7)).astype(np.float32),
        "b.weight": rng.normal(size=(3,)).astype(np.float32),
        "c.weight": rng.normal(size=(2, 3, 4)).astype(np.float32),
    }
    path = tmp_path / "t.cpm4"
    save_tensors(path, tensors)
    loaded, meta = load_tensors(path)
    assert set(loaded) == set(tensors)
    assert meta == {}
    for name, arr in tensors.items():
        assert loaded[name].dtype == np.float32
        assert np.array_equal(loaded[name], arr), name


def test_quantized_tensor_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    qt = _random_qt(rng, rows=6, cols=40, group_size=16)
    path = tmp_path / "q.cpm4"
    save_tensors(path, {"w": qt, "x": np.ones((2, 2), dtype=np.float32)})
    loaded, _ = load_tensors(path)
    got = loaded["w"]
    assert isinstance(got, QuantizedTensor)
    assert np.array_equal(got.codes, qt.codes)
    assert np.array_equal(got.scales, qt.scales)
    assert np.array_equal(got.zeros, qt.zeros)
    assert got.group_size == qt.group_size
    assert got.bits == 4


def test_meta_round_trip(tmp_path):
    meta = {"__config__": {"hidden_dim": 8, "name": "toy"}}
    path = tmp_path / "m.cpm4"
    save_tensors(path, {"w": np.zeros(3, dtype=np.float32)}, meta=meta)
    _, got = load_tensors(path)
    assert got == meta


def test_payloads_are_aligned(tmp_path):
    rng = np.random.default_rng(3)
    tensors = {f"t{i}": rng.normal(size=(3, 5)).astype(np.float32) for i in range(4)}
    path = tmp_path / "a.cpm4"
    save_tensors(path, tensors)
    raw = path.read_bytes()
    assert raw[:4] == MAGIC
    header_len = int.from_bytes(raw[8:16], "little")
    header = json.loads(raw[16 : 16 + header_len])
    for name in tensors:
        assert header[name]["offset"] % ALIGNMENT == 0, name


def test_magic_and_version_rejected(tmp_path):
    path = tmp_path / "bad.cpm4"
    save_tensors(path, {"w": np.zeros(2, dtype=np.float32)})
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_tensors(path)

    save_tensors(path, {"w": np.zeros(2, dtype=np.float32)})
    raw = bytearray(path.read_bytes())
    raw[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_tensors(path)


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "short.cpm4"
    save_tensors(path, {"w": np.arange(64, dtype=np.float32)})
    raw = path.read_bytes()
    path.write_bytes(raw[:-16])
    with pytest.raises((FormatError, ValidationError)):
        load_tensors(path)


def test_container_rejects_non_4bit_codes(tmp_path):
    rng = np.random.default_rng(4)
    qt = _random_qt(rng, rows=2, cols=8, group_size=4, bits=8)
    with pytest.raises(ValidationError):
        save_tensors(tmp_path / "x.cpm4", {"w": qt})


def test_quantized_tensor_validate_bounds():
    rng = np.random.default_rng(5)
    qt = _random_qt(rng, rows=2, cols=8, group_size=4)
    qt.validate("w")
    bad = QuantizedTensor(
        codes=np.full((2, 8), 16, dtype=np.uint8),
        scales=qt.scales,
        zeros=qt.zeros,
        group_size=4,
    )
    with pytest.raises(ValidationError):
        bad.validate("w")


def test_save_is_atomic_on_failure(tmp_path):
    path = tmp_path / "keep.cpm4"
    original = {"w": np.ones(4, dtype=np.float32)}
    save_tensors(path, original)
    before = path.read_bytes()
    # An unserializable tensor dict must not clobber the existing file.
    with pytest.raises((ValidationError, AttributeError, TypeError)):
        save_tensors(path, {"w": "not a tensor"})  # type: ignore[dict-item]
    assert path.read_bytes() == before
    assert [p for p in os.listdir(tmp_path) if p.startswith(".tmp-")] == []


def test_atomic_write_replaces_and_cleans_up(tmp_path):
    path = tmp_path / "f.bin"
    atomic_write(path, b"one")
    atomic_write(path, b"two")
    assert path.read_bytes() == b"two"
    assert [p for p in os.listdir(tmp_path) if p.startswith(".tmp-")] == []


def test_empty_name_rejected(tmp_path):
    with pytest.raises(ValidationError):
        save_tensors(tmp_path / "e.cpm4", {"": np.zeros(1, dtype=np.float32)})
