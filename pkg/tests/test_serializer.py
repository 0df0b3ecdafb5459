from __future__ import annotations

import hashlib
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gittheta.errors import CorruptContainer, DuplicateLabel
from gittheta.model import Dtype, Tensor
from gittheta.serializer import DIGEST_SIZE, MAGIC, deserialize, serialize
from support import random_shape, random_tensor


def overhead_bound(items) -> int:
    return 64 + sum(32 + len(label.encode()) for label, _ in items)


def test_empty_container():
    blob = serialize([])
    body = MAGIC + struct.pack("<I", 0)
    assert blob == body + hashlib.sha256(body).digest()
    assert deserialize(blob) == []


def test_single_f32_layout():
    t = Tensor.from_array(np.array([1.0, 2.0], dtype=np.float32))
    blob = serialize([("value", t)])
    header = MAGIC + struct.pack("<I", 1) + struct.pack("<H", 5) + b"value" + bytes([1, 1])
    header += struct.pack("<Q", 2)
    payload = bytes.fromhex("0000803F00000040")
    assert blob[: len(header)] == header
    assert blob[len(header) : len(header) + 8] == payload
    assert blob[len(header) + 8 :] == hashlib.sha256(header + payload).digest()
    assert len(blob) == len(header) + 8 + DIGEST_SIZE


def test_labels_sorted_regardless_of_input_order():
    a = Tensor.from_array(np.zeros(1, np.int8))
    assert serialize([("b", a), ("a", a)]) == serialize([("a", a), ("b", a)])
    assert [label for label, _ in deserialize(serialize([("b", a), ("a", a)]))] == ["a", "b"]


def test_duplicate_label():
    a = Tensor.from_array(np.zeros(1, np.int8))
    with pytest.raises(DuplicateLabel):
        serialize([("x", a), ("x", a)])


def test_flipped_payload_byte_is_digest_error():
    blob = bytearray(serialize([("value", Tensor.from_array(np.arange(8, dtype=np.float64)))]))
    blob[30] ^= 0xFF
    with pytest.raises(CorruptContainer) as info:
        deserialize(bytes(blob))
    assert info.value.reason == "digest"


def test_flipped_digest_byte_is_digest_error():
    blob = bytearray(serialize([]))
    blob[-1] ^= 1
    with pytest.raises(CorruptContainer) as info:
        deserialize(bytes(blob))
    assert info.value.reason == "digest"


@pytest.mark.parametrize("cut", [2, 6, 9, 14])
def test_truncated_mid_header_is_length_error(cut):
    blob = serialize([("value", Tensor.from_array(np.arange(4, dtype=np.float32)))])
    with pytest.raises(CorruptContainer) as info:
        deserialize(blob[:cut])
    assert info.value.reason == "length"


def test_bad_magic():
    with pytest.raises(CorruptContainer) as info:
        deserialize(b"NOPE" + bytes(40))
    assert info.value.reason == "magic"


def test_unsorted_labels_rejected():
    a = Tensor.from_array(np.zeros(1, np.int8))
    body = MAGIC + struct.pack("<I", 2)
    for label in (b"b", b"a"):
        body += struct.pack("<H", 1) + label + bytes([3, 1]) + struct.pack("<Q", 1) + a.data
    with pytest.raises(CorruptContainer) as info:
        deserialize(body + hashlib.sha256(body).digest())
    assert info.value.reason == "order"


def test_compressed_round_trip_and_determinism():
    t = Tensor.from_array(np.zeros((64, 64), np.float32))
    blob = serialize([("value", t)], compress=True)
    assert blob[:4] == b"THBZ"
    assert blob == serialize([("value", t)], compress=True)
    assert len(blob) < t.nbytes // 10
    assert deserialize(blob) == [("value", t)]


def test_corrupt_compressed_stream():
    with pytest.raises(CorruptContainer) as info:
        deserialize(b"THBZ" + b"garbage")
    assert info.value.reason == "format"


def test_thousand_random_round_trips_and_overhead():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        count = int(rng.integers(0, 5))
        items = [
            (f"t{i}/{'ü' * int(rng.integers(0, 3))}",
             random_tensor(rng, list(Dtype)[int(rng.integers(9))], random_shape(rng)))
            for i in range(count)
        ]
        blob = serialize(items)
        assert deserialize(blob) == sorted(items, key=lambda it: it[0])
        payload = sum(t.nbytes for _, t in items)
        assert len(blob) - payload <= overhead_bound(items)


@given(st.lists(st.tuples(st.sampled_from(list(Dtype)), st.lists(st.integers(0, 4), max_size=3)),
                max_size=4),
       st.integers(0, 2**32 - 1))
def test_round_trip_property(specs, seed):
    rng = np.random.default_rng(seed)
    items = [(f"label{i}", random_tensor(rng, d, tuple(shape))) for i, (d, shape) in enumerate(specs)]
    blob = serialize(items)
    assert serialize(deserialize(blob)) == blob
    assert deserialize(blob) == items
