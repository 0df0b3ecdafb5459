"""Tensors, model snapshots and the metadata document Git versions.

The metadata document is canonical JSON: UTF-8, keys sorted, no whitespace,
one trailing newline. Equal logical content always encodes to equal bytes.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import struct
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidTensor, MalformedMetadata, UnsupportedVersion

FORMAT_VERSION = 1
NUM_HASHES = 16


class Dtype(enum.Enum):
    F16 = "f16"
    F32 = "f32"
    F64 = "f64"
    I8 = "i8"
    I16 = "i16"
    I32 = "i32"
    I64 = "i64"
    U8 = "u8"
    BOOL = "bool"

    @property
    def code(self) -> int:
        return _CODES[self]

    @property
    def width(self) -> int:
        return _NUMPY[self].itemsize

    @property
    def numpy(self) -> np.dtype:
        return _NUMPY[self]

    @property
    def is_float(self) -> bool:
        return self in (Dtype.F16, Dtype.F32, Dtype.F64)

    @classmethod
    def from_code(cls, code: int) -> Dtype:
        try:
            return _BY_CODE[code]
        except KeyError:
            raise ValueError(f"unknown dtype code {code}") from None

    @classmethod
    def from_numpy(cls, dt: np.dtype | type) -> Dtype:
        dt = np.dtype(dt)
        for member, npdt in _NUMPY.items():
            if npdt.kind == dt.kind and npdt.itemsize == dt.itemsize:
                return member
        raise InvalidTensor(f"unsupported numpy dtype {dt}")


_NUMPY = {
    Dtype.F16: np.dtype("<f2"),
    Dtype.F32: np.dtype("<f4"),
    Dtype.F64: np.dtype("<f8"),
    Dtype.I8: np.dtype("i1"),
    Dtype.I16: np.dtype("<i2"),
    Dtype.I32: np.dtype("<i4"),
    Dtype.I64: np.dtype("<i8"),
    Dtype.U8: np.dtype("u1"),
    Dtype.BOOL: np.dtype("?"),
}
_CODES = {d: i for i, d in enumerate(Dtype)}
_BY_CODE = {i: d for d, i in _CODES.items()}


@dataclass(frozen=True)
class Tensor:
    """Row-major little-endian tensor payload.

    ``data`` must hold exactly ``prod(shape) * dtype.width`` bytes; this is
    checked on construction.
    """

    dtype: Dtype
    shape: tuple[int, ...]
    data: bytes = field(repr=False)

    def __post_init__(self) -> None:
        shape = tuple(int(s) for s in self.shape)
        if any(s < 0 for s in shape):
            raise InvalidTensor(f"negative extent in shape {shape}")
        object.__setattr__(self, "shape", shape)
        if not isinstance(self.data, bytes):
            object.__setattr__(self, "data", bytes(self.data))
        expected = math.prod(shape) * self.dtype.width
        if len(self.data) != expected:
            raise InvalidTensor(
                f"tensor of shape {shape} and dtype {self.dtype.value} needs "
                f"{expected} bytes, got {len(self.data)}"
            )

    @classmethod
    def from_array(cls, array, dtype: Dtype | None = None) -> Tensor:
        arr = np.asarray(array)
        if dtype is None:
            dtype = Dtype.from_numpy(arr.dtype)
        # tobytes() is C-ordered; ascontiguousarray would promote 0-d to 1-d.
        arr = arr.astype(dtype.numpy, copy=False)
        return cls(dtype, arr.shape, arr.tobytes(order="C"))

    def array(self) -> np.ndarray:
        """Read-only numpy view of the payload."""
        return np.frombuffer(self.data, dtype=self.dtype.numpy).reshape(self.shape)

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return len(self.data)


def validate_name(name: str) -> str:
    if not isinstance(name, str) or not name:
        raise InvalidTensor(f"parameter name must be a non-empty string, got {name!r}")
    for segment in name.split("/"):
        if not segment:
            raise InvalidTensor(f"empty path segment in parameter name {name!r}")
    if any(ord(c) < 32 or ord(c) == 127 for c in name):
        raise InvalidTensor(f"control character in parameter name {name!r}")
    return name


def join_name(segments: Iterable[str]) -> str:
    """Join native checkpoint keys into a '/'-separated parameter name.

    A key that itself contains '/' is rejected rather than escaped.
    """
    segments = list(segments)
    for seg in segments:
        if "/" in seg:
            raise InvalidTensor(f"native key {seg!r} contains '/'")
    return validate_name("/".join(segments))


class ModelSnapshot(Mapping[str, Tensor]):
    """Parameter-group name -> Tensor, iterated in lexicographic order."""

    def __init__(self, groups: Mapping[str, Tensor] | Iterable[tuple[str, Tensor]] = ()) -> None:
        items = groups.items() if isinstance(groups, Mapping) else groups
        store: dict[str, Tensor] = {}
        for name, tensor in items:
            validate_name(name)
            if name in store:
                raise InvalidTensor(f"duplicate parameter name {name!r}")
            if not isinstance(tensor, Tensor):
                raise InvalidTensor(f"group {name!r} is not a Tensor")
            store[name] = tensor
        self._groups = dict(sorted(store.items()))

    def __getitem__(self, name: str) -> Tensor:
        return self._groups[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._groups)

    def __len__(self) -> int:
        return len(self._groups)

    def __eq__(self, other: object) -> bool:
        if isinstance(other, ModelSnapshot):
            return self._groups == other._groups
        return NotImplemented

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}: {v.dtype.value}{list(v.shape)}" for k, v in self.items())
        return f"ModelSnapshot({{{inner}}})"


@dataclass(frozen=True)
class LshSignature:
    buckets: tuple[int, ...]

    def __post_init__(self) -> None:
        buckets = tuple(int(b) for b in self.buckets)
        if len(buckets) != NUM_HASHES:
            raise ValueError(f"signature needs {NUM_HASHES} buckets, got {len(buckets)}")
        object.__setattr__(self, "buckets", buckets)

    def hex(self) -> str:
        # Big-endian signed 64-bit, concatenated: 256 hex chars.
        return struct.pack(f">{NUM_HASHES}q", *self.buckets).hex()

    @classmethod
    def from_hex(cls, text: str) -> LshSignature:
        if len(text) != NUM_HASHES * 16:
            raise ValueError(f"signature hex must be {NUM_HASHES * 16} chars")
        return cls(struct.unpack(f">{NUM_HASHES}q", bytes.fromhex(text)))


@dataclass(frozen=True)
class ObjectPointer:
    oid: str
    size: int

    def __post_init__(self) -> None:
        if not is_oid(self.oid):
            raise ValueError(f"object id must be 64 lowercase hex chars, got {self.oid!r}")
        if self.size < 0:
            raise ValueError("object size must be non-negative")


def is_oid(text: object) -> bool:
    return (
        isinstance(text, str)
        and len(text) == 64
        and all(c in "0123456789abcdef" for c in text)
    )


class UpdateKind(enum.Enum):
    DENSE = "dense"
    SPARSE = "sparse"
    LOW_RANK = "low_rank"
    SCALE_VECTOR = "scale_vector"


@dataclass(frozen=True)
class GroupMetadata:
    """What Git versions for one parameter group.

    ``shape``/``dtype``/``lsh`` describe the reconstructed tensor, not the
    stored payload. Non-dense records carry ``flags["prior"]``, the digest of
    the record they were applied on top of.
    """

    shape: tuple[int, ...]
    dtype: Dtype
    lsh: LshSignature
    update_kind: UpdateKind
    pointer: ObjectPointer
    flags: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "flags", dict(sorted(self.flags.items())))
        for k, v in self.flags.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise ValueError("flags must map strings to strings")

    def to_json(self) -> dict:
        doc = {
            "dtype": self.dtype.value,
            "shape": list(self.shape),
            "lsh": self.lsh.hex(),
            "update_kind": self.update_kind.value,
            "pointer": {"oid": self.pointer.oid, "size": self.pointer.size},
        }
        if self.flags:
            doc["flags"] = dict(self.flags)
        return doc

    @classmethod
    def from_json(cls, doc: object) -> GroupMetadata:
        if not isinstance(doc, dict):
            raise MalformedMetadata("group entry must be an object")
        allowed = {"dtype", "shape", "lsh", "update_kind", "pointer", "flags"}
        missing = allowed - {"flags"} - doc.keys()
        if missing:
            raise MalformedMetadata(f"group entry missing {sorted(missing)}")
        if doc.keys() - allowed:
            raise MalformedMetadata(f"unknown group fields {sorted(doc.keys() - allowed)}")
        try:
            shape = doc["shape"]
            if not isinstance(shape, list) or not all(
                type(s) is int and s >= 0 for s in shape
            ):
                raise ValueError(f"bad shape {shape!r}")
            pointer = doc["pointer"]
            if not isinstance(pointer, dict) or set(pointer) != {"oid", "size"}:
                raise ValueError("pointer needs exactly oid and size")
            if type(pointer["size"]) is not int:
                raise ValueError("pointer size must be an integer")
            flags = doc.get("flags", {})
            if not isinstance(flags, dict):
                raise ValueError("flags must be an object")
            return cls(
                shape=tuple(shape),
                dtype=Dtype(doc["dtype"]),
                lsh=LshSignature.from_hex(doc["lsh"]),
                update_kind=UpdateKind(doc["update_kind"]),
                pointer=ObjectPointer(pointer["oid"], pointer["size"]),
                flags=flags,
            )
        except (ValueError, TypeError) as exc:
            raise MalformedMetadata(str(exc)) from exc

    def digest(self) -> str:
        """SHA-256 of the record's canonical encoding; identifies the record."""
        return hashlib.sha256(_canonical(self.to_json())).hexdigest()


@dataclass(frozen=True)
class ModelMetadata:
    checkpoint_type: str
    groups: Mapping[str, GroupMetadata] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __post_init__(self) -> None:
        for name in self.groups:
            validate_name(name)
        object.__setattr__(self, "groups", dict(sorted(self.groups.items())))


def _canonical(doc: object) -> bytes:
    return json.dumps(
        doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
    ).encode("utf-8")


def encode_metadata(meta: ModelMetadata) -> bytes:
    doc = {
        "format_version": meta.format_version,
        "checkpoint_type": meta.checkpoint_type,
        "groups": {name: g.to_json() for name, g in meta.groups.items()},
    }
    return _canonical(doc) + b"\n"


def _reject_duplicates(pairs: list[tuple[str, object]]) -> dict:
    out: dict = {}
    for key, value in pairs:
        if key in out:
            raise MalformedMetadata(f"duplicate key {key!r}")
        out[key] = value
    return out


def decode_metadata(data: bytes) -> ModelMetadata:
    try:
        text = data.decode("utf-8")
        doc = json.loads(text, object_pairs_hook=_reject_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedMetadata(f"cannot parse metadata: {exc}") from exc
    if not isinstance(doc, dict):
        raise MalformedMetadata("metadata must be a JSON object")
    version = doc.get("format_version")
    if type(version) is not int:
        raise MalformedMetadata("format_version missing or not an integer")
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"metadata format_version {version} is not supported")
    if set(doc) != {"format_version", "checkpoint_type", "groups"}:
        raise MalformedMetadata(f"unexpected top-level fields {sorted(doc)}")
    ctype, groups = doc["checkpoint_type"], doc["groups"]
    if not isinstance(ctype, str) or not isinstance(groups, dict):
        raise MalformedMetadata("checkpoint_type must be a string and groups an object")
    try:
        return ModelMetadata(
            checkpoint_type=ctype,
            groups={name: GroupMetadata.from_json(g) for name, g in groups.items()},
        )
    except InvalidTensor as exc:
        raise MalformedMetadata(str(exc)) from exc


def looks_like_metadata(data: bytes) -> bool:
    """Whether ``data`` is a theta metadata document (used by the filters)."""
    if data[:64].lstrip()[:1] != b"{" or b'"format_version"' not in data:
        return False
    try:
        decode_metadata(data)
    except (MalformedMetadata, UnsupportedVersion):
        return False
    return True
