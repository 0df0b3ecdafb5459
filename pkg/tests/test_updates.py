from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gittheta import lsh, updates
from gittheta.errors import (
    BrokenChain,
    FactorsRequired,
    InvalidTensor,
    MalformedCheckpoint,
    PriorValueUnavailable,
    ShapeMismatch,
)
from gittheta.model import Dtype, GroupMetadata, ModelMetadata, Tensor, UpdateKind
from gittheta.serializer import serialize
from gittheta.store import ObjectStore
from support import random_tensor, snapshot_of

T = Tensor.from_array


def f32(*values):
    return T(np.array(values, dtype=np.float32))


# -- extract -----------------------------------------------------------------------------

def test_sparse_delta_example():
    kind, payload = updates.extract(f32(1, 2, 3, 4), f32(1, 12, 3, 3), UpdateKind.SPARSE)
    assert kind is UpdateKind.SPARSE
    assert payload.indices.array().tolist() == [1, 3]
    assert payload.indices.dtype is Dtype.I64
    assert payload.values.array().tolist() == [10.0, -1.0]
    assert payload.values.dtype is Dtype.F32


def test_no_prior_auto_is_dense():
    new = f32(5, 6)
    assert updates.extract(None, new) == (UpdateKind.DENSE, updates.Dense(new))


def test_auto_sparse_on_500_of_a_million():
    rng = np.random.default_rng(0)
    prev = rng.standard_normal(1_000_000).astype(np.float32)
    new = prev.copy()
    idx = rng.choice(prev.size, 500, replace=False)
    new[idx] += 1.0
    kind, payload = updates.extract(T(prev), T(new))
    assert kind is UpdateKind.SPARSE
    brute = [i for i, (a, b) in enumerate(zip(prev.tolist(), new.tolist())) if a != b]
    assert payload.indices.array().tolist() == brute
    assert payload.indices.numel == 500


def test_auto_dense_above_threshold():
    prev = np.zeros(100, np.float32)
    new = prev.copy()
    new[:11] = 1
    assert updates.extract(T(prev), T(new))[0] is UpdateKind.DENSE
    new[10] = 0
    assert updates.extract(T(prev), T(new))[0] is UpdateKind.SPARSE


def test_auto_never_infers_factored_updates():
    a = np.ones((4, 4))
    assert updates.extract(T(a), T(a * 2))[0] is UpdateKind.DENSE


@pytest.mark.parametrize("kind", [UpdateKind.LOW_RANK, UpdateKind.SCALE_VECTOR])
def test_factored_kinds_need_side_load(kind):
    with pytest.raises(FactorsRequired):
        updates.extract(f32(1, 2), f32(1, 3), kind)


def test_sparse_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        updates.extract(f32(1, 2), f32(1, 2, 3), UpdateKind.SPARSE)
    assert updates.extract(f32(1, 2), f32(1, 2, 3))[0] is UpdateKind.DENSE


def test_side_load_validated_against_prior():
    lr = updates.LowRank(T(np.ones((3, 1))), T(np.ones((1, 2))))
    with pytest.raises(ShapeMismatch):
        updates.extract(T(np.zeros((2, 2))), T(np.zeros((2, 2))), side_load=lr)
    with pytest.raises(PriorValueUnavailable):
        updates.extract(None, T(np.zeros((3, 2))), side_load=lr)


def test_parse_kind():
    assert updates.parse_kind(None) == updates.AUTO
    assert updates.parse_kind("auto") == updates.AUTO
    assert updates.parse_kind("low_rank") is UpdateKind.LOW_RANK
    with pytest.raises(ValueError):
        updates.parse_kind("lora")


# -- apply -----------------------------------------------------------------------------

def test_dense_identity():
    v = T(np.array([[3, 4], [6, 8]], np.float32))
    assert updates.apply_update(updates.Dense(v), None) == v


def test_low_rank_outer_product_over_zeros():
    payload = updates.LowRank(T(np.array([[1], [2]], np.float32)), T(np.array([[3, 4]], np.float32)))
    out = updates.apply_update(payload, T(np.zeros((2, 2), np.float32)))
    assert out.array().tolist() == [[3, 4], [6, 8]]
    assert out.dtype is Dtype.F32


def test_scale_vector_axes():
    prior = T(np.arange(6, dtype=np.float64).reshape(2, 3))
    rows = updates.apply_update(updates.ScaleVector(T(np.array([1.0, 10.0])), 0), prior)
    assert rows.array().tolist() == [[0, 1, 2], [30, 40, 50]]
    cols = updates.apply_update(updates.ScaleVector(T(np.array([1.0, 2.0, 3.0]))), prior)
    assert cols.array().tolist() == [[0, 2, 6], [3, 8, 15]]
    with pytest.raises(ShapeMismatch):
        updates.apply_update(updates.ScaleVector(T(np.array([1.0, 2.0]))), prior)
    with pytest.raises(ShapeMismatch):
        updates.apply_update(updates.ScaleVector(T(np.array([1.0])), 2), prior)


def test_non_dense_without_prior():
    with pytest.raises(PriorValueUnavailable):
        updates.apply_update(updates.ScaleVector(f32(2)), None)


def test_payload_invariants():
    with pytest.raises(InvalidTensor):
        updates.Sparse(T(np.array([3, 1], np.int64)), f32(1, 1))  # not increasing
    with pytest.raises(InvalidTensor):
        updates.Sparse(T(np.array([1], np.int64)), f32(1, 1))  # length mismatch
    with pytest.raises(InvalidTensor):
        updates.LowRank(T(np.ones((2, 0))), T(np.ones((0, 2))))  # K = 0
    with pytest.raises(InvalidTensor):
        updates.LowRank(T(np.ones((2, 1), np.float32)), T(np.ones((1, 2))))  # dtype mismatch
    with pytest.raises(ShapeMismatch):
        updates.apply_update(updates.Sparse(T(np.array([9], np.int64)), f32(1)), f32(0, 0))


def test_integer_sparse_is_exact_with_wraparound():
    prev = T(np.array([127, -128, 5], np.int8))
    new = T(np.array([-128, 127, 5], np.int8))
    kind, payload = updates.extract(prev, new, UpdateKind.SPARSE)
    assert updates.apply_update(payload, prev) == new


def test_bool_sparse():
    prev = T(np.array([True, False, False, True]))
    new = T(np.array([False, False, True, True]))
    _, payload = updates.extract(prev, new, UpdateKind.SPARSE)
    assert payload.indices.array().tolist() == [0, 2]
    assert updates.apply_update(payload, prev) == new


# -- write / read -------------------------------------------------------------------------

def test_write_labels():
    v = f32(1)
    assert updates.write(updates.Dense(v)) == [("value", v)]
    idx = T(np.array([0], np.int64))
    assert [label for label, _ in updates.write(updates.Sparse(idx, v))] == ["indices", "values"]
    assert [label for label, _ in updates.write(updates.LowRank(T(np.ones((1, 1))), T(np.ones((1, 1)))))] == ["A", "B"]
    assert [label for label, _ in updates.write(updates.ScaleVector(v, 0))] == ["v"]
    assert updates.payload_flags(updates.ScaleVector(v, -1), prior_rank=2) == {"axis": "1"}


def random_payload(rng, kind):
    if kind is UpdateKind.DENSE:
        return updates.Dense(random_tensor(rng, Dtype.F32, (3, 2)))
    if kind is UpdateKind.SPARSE:
        idx = np.sort(rng.choice(50, int(rng.integers(0, 10)), replace=False)).astype(np.int64)
        return updates.Sparse(T(idx), random_tensor(rng, Dtype.F64, (idx.size,)))
    if kind is UpdateKind.LOW_RANK:
        k = int(rng.integers(1, 4))
        return updates.LowRank(random_tensor(rng, Dtype.F32, (4, k)), random_tensor(rng, Dtype.F32, (k, 5)))
    return updates.ScaleVector(random_tensor(rng, Dtype.F16, (6,)), int(rng.integers(0, 3)))


@given(st.sampled_from(list(UpdateKind)), st.integers(0, 2**32 - 1))
def test_read_write_round_trip(kind, seed):
    payload = random_payload(np.random.default_rng(seed), kind)
    flags = updates.payload_flags(payload)
    blob = serialize(updates.write(payload))
    from gittheta.serializer import deserialize

    assert updates.read(kind, deserialize(blob), flags) == payload


def test_read_rejects_wrong_labels():
    with pytest.raises(BrokenChain):
        updates.read(UpdateKind.SPARSE, [("value", f32(1))])


# -- reconstruction through history --------------------------------------------------------

class Chain:
    """Builds a metadata history by storing payloads the way the filters do."""

    def __init__(self, tmp_path):
        self.store = ObjectStore(tmp_path / "store")
        self.versions: list[ModelMetadata] = []

    def history(self):
        return updates.MemoryHistory(self.versions, self.store.get)

    def commit(self, name, payload, value):
        prev = self.versions[-1].groups.get(name) if self.versions else None
        flags = {}
        if not isinstance(payload, updates.Dense):
            flags = {"prior": prev.digest(), **updates.payload_flags(payload, len(value.shape))}
        rec = GroupMetadata(value.shape, value.dtype, lsh.signature(value), updates.kind_of(payload),
                            self.store.put_tensors(updates.write(payload)), flags)
        self.versions.append(ModelMetadata("flat-bin", {name: rec}))
        return rec


def test_three_step_chain_oracle(tmp_path):
    chain = Chain(tmp_path)
    chain.commit("w", updates.Dense(f32(1, 2, 3, 4)), f32(1, 2, 3, 4))
    chain.commit("w", updates.Sparse(T(np.array([0], np.int64)), f32(1)), f32(2, 2, 3, 4))
    rec = chain.commit("w", updates.ScaleVector(f32(2, 2, 2, 2), 0), f32(4, 4, 6, 8))
    # Scalar oracle evaluated by hand: [1,2,3,4] -> [2,2,3,4] -> [4,4,6,8].
    oracle = [((x + (1 if i == 0 else 0)) * 2) for i, x in enumerate([1, 2, 3, 4])]
    value = updates.reconstruct(rec, "w", chain.history())
    assert value.array().tolist() == oracle == [4, 4, 6, 8]
    assert value.dtype is Dtype.F32


def test_repeated_identical_records_resolve(tmp_path):
    chain = Chain(tmp_path)
    chain.commit("w", updates.Dense(f32(0, 0)), f32(0, 0))
    step = updates.Sparse(T(np.array([1], np.int64)), f32(1))
    chain.commit("w", step, f32(0, 1))
    rec = chain.commit("w", step, f32(0, 2))
    assert updates.reconstruct(rec, "w", chain.history()).array().tolist() == [0, 2]


def test_non_dense_without_history(tmp_path):
    chain = Chain(tmp_path)
    chain.commit("w", updates.Dense(f32(1)), f32(1))
    rec = chain.commit("w", updates.ScaleVector(f32(3)), f32(3))
    with pytest.raises(PriorValueUnavailable):
        updates.reconstruct(rec, "w", updates.MemoryHistory([], chain.store.get))


def test_missing_link_is_broken_chain(tmp_path):
    chain = Chain(tmp_path)
    chain.commit("w", updates.Dense(f32(1)), f32(1))
    chain.commit("w", updates.ScaleVector(f32(3)), f32(3))
    rec = chain.commit("w", updates.ScaleVector(f32(2)), f32(6))
    history = updates.MemoryHistory([chain.versions[0], chain.versions[2]], chain.store.get)
    with pytest.raises(BrokenChain):
        updates.reconstruct(rec, "w", history)


def test_cycle_hits_depth_limit(tmp_path):
    store = ObjectStore(tmp_path / "s")
    payload = updates.ScaleVector(f32(1))
    pointer = store.put_tensors(updates.write(payload))
    sig = lsh.signature(f32(1))

    class Loop:
        def previous(self, name, record):
            return record  # a self-referencing chain

        def fetch(self, oid):
            return store.get(oid)

        def max_depth(self):
            return 5

    rec = GroupMetadata((1,), Dtype.F32, sig, UpdateKind.SCALE_VECTOR, pointer, {"prior": "00" * 32})
    with pytest.raises(BrokenChain):
        updates.reconstruct(rec, "w", Loop())


def test_shape_mismatch_during_replay(tmp_path):
    chain = Chain(tmp_path)
    chain.commit("w", updates.Dense(f32(1, 2)), f32(1, 2))
    rec = chain.commit("w", updates.ScaleVector(f32(2, 2)), f32(2, 4))
    bad = GroupMetadata((3,), rec.dtype, rec.lsh, rec.update_kind, rec.pointer, rec.flags)
    with pytest.raises(ShapeMismatch):
        updates.reconstruct(bad, "w", chain.history())


@given(st.lists(st.tuples(st.sampled_from(["sparse", "scale", "lowrank", "dense"]),
                          st.integers(0, 2**31)), min_size=1, max_size=6))
def test_reconstruction_fidelity_property(steps):
    import tempfile
    from pathlib import Path

    with tempfile.TemporaryDirectory() as tmp:
        chain = Chain(Path(tmp))
        rng = np.random.default_rng(len(steps))
        value = T(rng.standard_normal((4, 3)).astype(np.float32))
        chain.commit("w", updates.Dense(value), value)
        for kind, seed in steps:
            r = np.random.default_rng(seed)
            if kind == "sparse":
                new = value.array().copy()
                new.reshape(-1)[r.integers(0, 12)] += np.float32(r.standard_normal())
                _, payload = updates.extract(value, T(new), UpdateKind.SPARSE)
            elif kind == "scale":
                payload = updates.ScaleVector(T(r.uniform(0.5, 2, 3).astype(np.float32)))
            elif kind == "lowrank":
                payload = updates.LowRank(T(r.standard_normal((4, 1)).astype(np.float32)),
                                          T(r.standard_normal((1, 3)).astype(np.float32)))
            else:
                payload = updates.Dense(T(r.standard_normal((4, 3)).astype(np.float32)))
            value = updates.apply_update(payload, value)
            rec = chain.commit("w", payload, value)
        got = updates.reconstruct(rec, "w", chain.history())
        assert np.allclose(got.array(), value.array(), rtol=1e-6, atol=1e-8)


def test_sparse_minimality(tmp_path):
    rng = np.random.default_rng(1)
    for dtype in (Dtype.F32, Dtype.F64, Dtype.I16, Dtype.U8):
        prev = random_tensor(rng, dtype, (1000,))
        arr = prev.array().copy()
        idx = rng.choice(1000, 37, replace=False)
        arr[idx] = arr[idx] + np.ones(1, dtype.numpy)
        kind, payload = updates.extract(prev, T(arr, dtype), UpdateKind.SPARSE)
        labeled = updates.write(payload)
        blob = serialize(labeled)
        overhead = 64 + sum(32 + len(label) for label, _ in labeled)
        assert len(blob) <= 2 * 37 * max(dtype.width, 8) + overhead


# -- side-loaded update data ----------------------------------------------------------------

def test_side_loaded_payloads():
    snap = snapshot_of({
        "enc/w/A": np.ones((3, 2), np.float32),
        "enc/w/B": np.ones((2, 4), np.float32),
        "bias/v": np.ones(4, np.float32),
        "gate/v": np.ones(3, np.float32),
        "gate/axis": np.array([0], np.int64),
    })
    loaded = updates.side_loaded_payloads(snap)
    assert isinstance(loaded["enc/w"], updates.LowRank)
    assert loaded["bias"] == updates.ScaleVector(snap["bias/v"], -1)
    assert loaded["gate"].axis == 0


@pytest.mark.parametrize("arrays", [
    {"w/A": np.ones((2, 1))},
    {"w/C": np.ones(1)},
    {"w": np.ones(1)},
    {"w/v": np.ones(2), "w/axis": np.array([0.5])},
])
def test_side_load_malformed(arrays):
    with pytest.raises(MalformedCheckpoint):
        updates.side_loaded_payloads(snapshot_of(arrays))
