"""Update types: how a parameter group changed, and how to replay it.

Every non-dense record stores ``flags["prior"]``, the digest of the record it
was applied on top of. Reconstruction walks those links back through history
until it reaches a dense record, then replays the chain forward. Arithmetic
for float groups happens in f64 and is cast back to the group's dtype;
integer groups use wrapping native arithmetic and bool groups use xor, so
sparse chains on them are exact.
"""

from __future__ import annotations

import threading
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass
from typing import Protocol, Union

import numpy as np

from . import serializer
from .errors import (
    BrokenChain,
    FactorsRequired,
    InvalidTensor,
    MalformedCheckpoint,
    PriorValueUnavailable,
    ShapeMismatch,
)
from .model import Dtype, GroupMetadata, ModelMetadata, ModelSnapshot, Tensor, UpdateKind

AUTO = "auto"
SPARSE_DENSITY_LIMIT = 0.1
ENV_UPDATE_TYPE = "THETA_UPDATE_TYPE"
ENV_UPDATE_DATA = "THETA_UPDATE_DATA"
RECONSTRUCTION_RTOL = 1e-6
RECONSTRUCTION_ATOL = 1e-8


@dataclass(frozen=True)
class Dense:
    value: Tensor


@dataclass(frozen=True)
class Sparse:
    indices: Tensor
    values: Tensor

    def __post_init__(self) -> None:
        if self.indices.dtype != Dtype.I64 or len(self.indices.shape) != 1:
            raise InvalidTensor("sparse indices must be a 1-d i64 tensor")
        if len(self.values.shape) != 1 or self.values.numel != self.indices.numel:
            raise InvalidTensor("sparse values must be 1-d and match the index count")
        idx = self.indices.array()
        if idx.size and (idx[0] < 0 or np.any(np.diff(idx) <= 0)):
            raise InvalidTensor("sparse indices must be non-negative and strictly increasing")


@dataclass(frozen=True)
class LowRank:
    a: Tensor
    b: Tensor

    def __post_init__(self) -> None:
        if len(self.a.shape) != 2 or len(self.b.shape) != 2:
            raise InvalidTensor("low-rank factors must be matrices")
        if self.a.shape[1] != self.b.shape[0] or self.a.shape[1] < 1:
            raise InvalidTensor(f"factor shapes {self.a.shape} x {self.b.shape} do not chain")
        if self.a.dtype != self.b.dtype:
            raise InvalidTensor("low-rank factors must share a dtype")


@dataclass(frozen=True)
class ScaleVector:
    v: Tensor
    axis: int = -1

    def __post_init__(self) -> None:
        if len(self.v.shape) != 1:
            raise InvalidTensor("scale vector must be 1-d")


UpdatePayload = Union[Dense, Sparse, LowRank, ScaleVector]

_KINDS = {Dense: UpdateKind.DENSE, Sparse: UpdateKind.SPARSE,
          LowRank: UpdateKind.LOW_RANK, ScaleVector: UpdateKind.SCALE_VECTOR}


def kind_of(payload: UpdatePayload) -> UpdateKind:
    return _KINDS[type(payload)]


def parse_kind(text: str | None) -> UpdateKind | str:
    if text is None or text == "" or text == AUTO:
        return AUTO
    try:
        return UpdateKind(text)
    except ValueError:
        raise ValueError(
            f"unknown update type {text!r}; expected auto, dense, sparse, low_rank or scale_vector"
        ) from None


# -- arithmetic -------------------------------------------------------------

def cast_from_f64(values: np.ndarray, dtype: Dtype) -> np.ndarray:
    if dtype.is_float:
        with np.errstate(over="ignore", invalid="ignore"):
            return values.astype(dtype.numpy)
    if dtype == Dtype.BOOL:
        return values != 0
    info = np.iinfo(dtype.numpy)
    return np.clip(np.rint(values), info.min, info.max).astype(dtype.numpy)


def _normalize_axis(axis: int, rank: int) -> int:
    resolved = axis + rank if axis < 0 else axis
    if not 0 <= resolved < rank:
        raise ShapeMismatch(f"axis {axis} out of range for rank {rank}")
    return resolved


def apply_update(payload: UpdatePayload, prior: Tensor | None) -> Tensor:
    """One forward step: the value after applying ``payload`` on ``prior``."""
    if isinstance(payload, Dense):
        return payload.value
    if prior is None:
        raise PriorValueUnavailable(f"{kind_of(payload).value} update needs a prior value")
    if isinstance(payload, Sparse):
        return _apply_sparse(payload, prior)
    if isinstance(payload, LowRank):
        if len(prior.shape) != 2 or prior.shape != (payload.a.shape[0], payload.b.shape[1]):
            raise ShapeMismatch(
                f"low-rank factors {payload.a.shape} x {payload.b.shape} "
                f"do not match prior shape {prior.shape}"
            )
        delta = payload.a.array().astype(np.float64) @ payload.b.array().astype(np.float64)
        out = prior.array().astype(np.float64) + delta
        return Tensor.from_array(cast_from_f64(out, prior.dtype), prior.dtype)
    if isinstance(payload, ScaleVector):
        rank = len(prior.shape)
        if rank < 1:
            raise ShapeMismatch("scale-vector updates need a tensor of rank >= 1")
        axis = _normalize_axis(payload.axis, rank)
        if payload.v.numel != prior.shape[axis]:
            raise ShapeMismatch(
                f"scale vector of length {payload.v.numel} does not match "
                f"extent {prior.shape[axis]} of axis {axis}"
            )
        bshape = [1] * rank
        bshape[axis] = prior.shape[axis]
        scale = payload.v.array().astype(np.float64).reshape(bshape)
        out = prior.array().astype(np.float64) * scale
        return Tensor.from_array(cast_from_f64(out, prior.dtype), prior.dtype)
    raise TypeError(f"unknown payload {payload!r}")


def _apply_sparse(payload: Sparse, prior: Tensor) -> Tensor:
    idx = payload.indices.array()
    if idx.size and idx[-1] >= prior.numel:
        raise ShapeMismatch(f"sparse index {idx[-1]} out of range for {prior.numel} elements")
    if payload.values.dtype != prior.dtype:
        raise ShapeMismatch(
            f"sparse values are {payload.values.dtype.value}, prior is {prior.dtype.value}"
        )
    flat = prior.array().reshape(-1)
    vals = payload.values.array()
    if prior.dtype.is_float:
        out = flat.astype(np.float64)
        out[idx] += vals.astype(np.float64)
        out = cast_from_f64(out, prior.dtype)
    elif prior.dtype == Dtype.BOOL:
        out = flat.copy()
        out[idx] ^= vals
    else:
        out = flat.copy()
        out[idx] += vals  # wraps: exact inverse of the wrapping delta
    return Tensor.from_array(out.reshape(prior.shape), prior.dtype)


def _sparse_delta(prev: Tensor, new: Tensor) -> Sparse:
    a = prev.array().reshape(-1)
    b = new.array().reshape(-1)
    if new.dtype.is_float:
        with np.errstate(invalid="ignore"):
            delta = b.astype(np.float64) - a.astype(np.float64)
        changed = np.flatnonzero(delta != 0)
        values = cast_from_f64(delta[changed], new.dtype)
    elif new.dtype == Dtype.BOOL:
        changed = np.flatnonzero(a != b)
        values = np.ones(changed.size, dtype=bool)
    else:
        changed = np.flatnonzero(a != b)
        values = b[changed] - a[changed]
    return Sparse(
        Tensor.from_array(changed.astype(np.int64), Dtype.I64),
        Tensor.from_array(values, new.dtype),
    )


def reconstructs(result: Tensor, target: Tensor) -> bool:
    """Whether ``result`` matches ``target`` within the reconstruction tolerance."""
    if result.shape != target.shape or result.dtype != target.dtype:
        return False
    if not target.dtype.is_float:
        return result.data == target.data
    return bool(np.allclose(
        result.array().astype(np.float64), target.array().astype(np.float64),
        rtol=RECONSTRUCTION_RTOL, atol=RECONSTRUCTION_ATOL, equal_nan=True,
    ))


def extract(
    prev: Tensor | None,
    new: Tensor,
    requested: UpdateKind | str = AUTO,
    *,
    side_load: LowRank | ScaleVector | None = None,
) -> tuple[UpdateKind, UpdatePayload]:
    """Smallest payload that turns ``prev`` into ``new``.

    Auto chooses sparse when at most 10% of elements changed (and the sparse
    replay reproduces ``new``), dense otherwise. Low-rank and scale-vector
    payloads are never inferred; they come from ``side_load``.
    """
    if side_load is not None:
        if prev is None:
            raise PriorValueUnavailable("side-loaded update has no prior value to apply to")
        kind = kind_of(side_load)
        if requested not in (AUTO, kind):
            raise FactorsRequired(
                f"side-loaded {kind.value} payload conflicts with requested {requested}"
            )
        apply_update(side_load, prev)  # validates shapes against the prior
        return kind, side_load
    if requested in (UpdateKind.LOW_RANK, UpdateKind.SCALE_VECTOR):
        raise FactorsRequired(
            f"{requested.value} updates cannot be inferred; side-load them via {ENV_UPDATE_DATA}"
        )
    if requested == UpdateKind.DENSE or (requested == AUTO and prev is None):
        return UpdateKind.DENSE, Dense(new)
    if prev is None:
        raise PriorValueUnavailable("sparse update requested for a group with no prior value")
    if prev.shape != new.shape or prev.dtype != new.dtype:
        if requested == AUTO:
            return UpdateKind.DENSE, Dense(new)
        raise ShapeMismatch(
            f"cannot diff {prev.dtype.value}{list(prev.shape)} against "
            f"{new.dtype.value}{list(new.shape)}"
        )
    sparse = _sparse_delta(prev, new)
    if requested == UpdateKind.SPARSE:
        return UpdateKind.SPARSE, sparse
    if new.numel == 0 or sparse.indices.numel > SPARSE_DENSITY_LIMIT * new.numel:
        return UpdateKind.DENSE, Dense(new)
    if not reconstructs(_apply_sparse(sparse, prev), new):
        return UpdateKind.DENSE, Dense(new)
    return UpdateKind.SPARSE, sparse


# -- storage form -----------------------------------------------------------

def write(payload: UpdatePayload) -> list[tuple[str, Tensor]]:
    if isinstance(payload, Dense):
        return [("value", payload.value)]
    if isinstance(payload, Sparse):
        return [("indices", payload.indices), ("values", payload.values)]
    if isinstance(payload, LowRank):
        return [("A", payload.a), ("B", payload.b)]
    if isinstance(payload, ScaleVector):
        return [("v", payload.v)]
    raise TypeError(f"unknown payload {payload!r}")


def payload_flags(payload: UpdatePayload, prior_rank: int | None = None) -> dict[str, str]:
    """Flags a payload needs beyond its tensors (the resolved scale axis)."""
    if isinstance(payload, ScaleVector):
        axis = payload.axis
        if prior_rank is not None:
            axis = _normalize_axis(axis, prior_rank)
        return {"axis": str(axis)}
    return {}


def read(kind: UpdateKind, tensors: Sequence[tuple[str, Tensor]], flags: Mapping[str, str] | None = None) -> UpdatePayload:
    found = dict(tensors)
    flags = flags or {}
    expected = {UpdateKind.DENSE: {"value"}, UpdateKind.SPARSE: {"indices", "values"},
                UpdateKind.LOW_RANK: {"A", "B"}, UpdateKind.SCALE_VECTOR: {"v"}}[kind]
    if set(found) != expected:
        raise BrokenChain(f"{kind.value} payload has labels {sorted(found)}, expected {sorted(expected)}")
    if kind == UpdateKind.DENSE:
        return Dense(found["value"])
    if kind == UpdateKind.SPARSE:
        return Sparse(found["indices"], found["values"])
    if kind == UpdateKind.LOW_RANK:
        return LowRank(found["A"], found["B"])
    return ScaleVector(found["v"], int(flags.get("axis", "-1")))


# -- history ----------------------------------------------------------------

class PriorResolver(Protocol):
    """Access to earlier versions of a parameter group and to stored blobs."""

    def previous(self, name: str, record: GroupMetadata) -> GroupMetadata:
        """The record ``record`` was applied on top of."""

    def fetch(self, oid: str) -> bytes:
        """Stored blob bytes for ``oid``."""

    def max_depth(self) -> int:
        """Upper bound on chain length (the number of known versions)."""


def load_payload(record: GroupMetadata, resolver: PriorResolver) -> UpdatePayload:
    blob = resolver.fetch(record.pointer.oid)
    return read(record.update_kind, serializer.deserialize(blob), record.flags)


def reconstruct(record: GroupMetadata, name: str, resolver: PriorResolver) -> Tensor:
    """Current value of group ``name`` as described by ``record``.

    Follows prior links until a dense record, then replays forward.
    """
    chain = [record]
    limit = resolver.max_depth() + 1
    while chain[-1].update_kind != UpdateKind.DENSE:
        if len(chain) > limit:
            raise BrokenChain(f"group {name!r}: no dense record within {limit} steps")
        chain.append(resolver.previous(name, chain[-1]))
    value: Tensor | None = None
    for step in reversed(chain):
        value = apply_update(load_payload(step, resolver), value)
        if value.shape != step.shape or value.dtype != step.dtype:
            raise ShapeMismatch(
                f"group {name!r}: replay produced {value.dtype.value}{list(value.shape)}, "
                f"record declares {step.dtype.value}{list(step.shape)}"
            )
    assert value is not None
    return value


class MemoryHistory:
    """PriorResolver over an in-memory list of metadata versions.

    ``versions`` runs oldest to newest; ``fetch`` is any oid -> bytes callable
    (typically an object store's ``get``).
    """

    def __init__(self, versions: Sequence[ModelMetadata], fetch: Callable[[str], bytes]) -> None:
        self._versions = list(versions)
        self._fetch = fetch
        self._lock = threading.Lock()
        self._index: dict[tuple[str, str], GroupMetadata] | None = None

    def add(self, meta: ModelMetadata) -> None:
        with self._lock:
            self._versions.append(meta)
            self._index = None

    add_version = add

    def _lookup(self) -> dict[tuple[str, str], GroupMetadata]:
        with self._lock:
            if self._index is None:
                index = {}
                for meta in self._versions:
                    for name, rec in meta.groups.items():
                        index[(name, rec.digest())] = rec
                self._index = index
            return self._index

    def previous(self, name: str, record: GroupMetadata) -> GroupMetadata:
        return find_prior(name, record, self._lookup(),
                          known=any(name in m.groups for m in self._versions))

    def fetch(self, oid: str) -> bytes:
        return self._fetch(oid)

    def max_depth(self) -> int:
        return len(self._versions)


def find_prior(
    name: str,
    record: GroupMetadata,
    index: Mapping[tuple[str, str], GroupMetadata],
    *,
    known: bool,
) -> GroupMetadata:
    link = record.flags.get("prior")
    if link is None:
        raise PriorValueUnavailable(
            f"group {name!r}: {record.update_kind.value} record has no link to a prior version"
        )
    prior = index.get((name, link))
    if prior is None:
        if not known:
            raise PriorValueUnavailable(f"group {name!r} has no earlier version in history")
        raise BrokenChain(f"group {name!r}: prior record {link[:12]} not found in history")
    return prior


# -- side-loaded update data ------------------------------------------------

def side_loaded_payloads(snapshot: ModelSnapshot) -> dict[str, LowRank | ScaleVector]:
    """Group ``<param>/A``, ``<param>/B``, ``<param>/v`` (and optional
    ``<param>/axis``) entries of an update-data checkpoint by parameter."""
    parts: dict[str, dict[str, Tensor]] = {}
    for name, tensor in snapshot.items():
        param, sep, leaf = name.rpartition("/")
        if not sep or leaf not in ("A", "B", "v", "axis"):
            raise MalformedCheckpoint(
                f"update data entry {name!r} must be named <param>/A, /B, /v or /axis"
            )
        parts.setdefault(param, {})[leaf] = tensor
    out: dict[str, LowRank | ScaleVector] = {}
    for param, leaves in parts.items():
        keys = set(leaves)
        if keys == {"A", "B"}:
            out[param] = LowRank(leaves["A"], leaves["B"])
        elif keys in ({"v"}, {"v", "axis"}):
            axis = -1
            if "axis" in leaves:
                ax = leaves["axis"]
                if ax.numel != 1 or ax.dtype.is_float:
                    raise MalformedCheckpoint(f"{param}/axis must be a single integer")
                axis = int(ax.array().reshape(-1)[0])
            out[param] = ScaleVector(leaves["v"], axis)
        else:
            raise MalformedCheckpoint(
                f"update data for {param!r} has entries {sorted(keys)}; "
                "expected A and B, or v (with optional axis)"
            )
    return out
