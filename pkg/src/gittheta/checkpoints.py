"""Checkpoint formats: framework-native bytes <-> ModelSnapshot.

New formats attach by subclassing :class:`CheckpointFormat` and calling
:func:`register`. Lookup never falls back to a default format.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import serializer
from .errors import CorruptContainer, InvalidTensor, MalformedCheckpoint, UnknownFormat, UnrepresentableDtype
from .model import Dtype, ModelSnapshot, Tensor, join_name

ENV_CHECKPOINT_TYPE = "THETA_CHECKPOINT_TYPE"


class CheckpointFormat:
    key: str = ""

    def load(self, data: bytes) -> ModelSnapshot:
        raise NotImplementedError

    def save(self, snapshot: ModelSnapshot) -> bytes:
        raise NotImplementedError


class FlatBinFormat(CheckpointFormat):
    """The tensor container, used directly as a checkpoint file."""

    key = "flat-bin"

    def load(self, data: bytes) -> ModelSnapshot:
        try:
            entries = serializer.deserialize(data)
        except CorruptContainer as exc:
            raise MalformedCheckpoint(f"flat-bin: {exc}") from exc
        try:
            return ModelSnapshot(entries)
        except InvalidTensor as exc:
            raise MalformedCheckpoint(f"flat-bin: {exc}") from exc

    def save(self, snapshot: ModelSnapshot) -> bytes:
        return serializer.serialize(snapshot.items())


_JSON_DTYPES = (Dtype.F32, Dtype.F64, Dtype.I32, Dtype.I64)
_LEAF_KEYS = {"dtype", "shape", "data"}


class JsonTextFormat(CheckpointFormat):
    """Human-readable ``{name: {dtype, shape, data}}`` checkpoints.

    Nested objects are accepted on load and flattened to '/'-joined names;
    save always writes the flat form. Floats are written with Python's
    shortest round-trip repr, so values survive exactly.
    """

    key = "json-text"

    def load(self, data: bytes) -> ModelSnapshot:
        try:
            doc = json.loads(data.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            offset = getattr(exc, "pos", getattr(exc, "start", None))
            raise MalformedCheckpoint(f"json-text: {exc}", offset) from exc
        if not isinstance(doc, dict):
            raise MalformedCheckpoint("json-text: top level must be an object", 0)
        groups: list[tuple[str, Tensor]] = []
        try:
            self._walk(doc, [], groups)
            return ModelSnapshot(groups)
        except InvalidTensor as exc:
            raise MalformedCheckpoint(f"json-text: {exc}") from exc

    def _walk(self, node: dict, prefix: list[str], out: list) -> None:
        for key, value in node.items():
            path = prefix + [key]
            if not isinstance(value, dict):
                raise MalformedCheckpoint(f"json-text: {'/'.join(path)!r} is not an object")
            if self._is_leaf(value):
                name = key if not prefix else join_name(path)
                out.append((name, self._tensor(name, value)))
            else:
                if "/" in key:
                    raise InvalidTensor(f"native key {key!r} contains '/'")
                self._walk(value, path, out)

    @staticmethod
    def _is_leaf(value: dict) -> bool:
        return set(value) == _LEAF_KEYS and isinstance(value["dtype"], str)

    @staticmethod
    def _tensor(name: str, leaf: dict) -> Tensor:
        try:
            dtype = Dtype(leaf["dtype"])
        except ValueError:
            raise MalformedCheckpoint(f"json-text: {name!r} has unknown dtype {leaf['dtype']!r}") from None
        if dtype not in _JSON_DTYPES:
            raise MalformedCheckpoint(f"json-text: dtype {dtype.value} not allowed ({name!r})")
        shape, values = leaf["shape"], leaf["data"]
        if not isinstance(shape, list) or not all(type(s) is int and s >= 0 for s in shape):
            raise MalformedCheckpoint(f"json-text: bad shape for {name!r}")
        if not isinstance(values, list):
            raise MalformedCheckpoint(f"json-text: data for {name!r} must be a flat list")
        if dtype.is_float:
            ok = all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values)
        else:
            ok = all(type(v) is int for v in values)
        if not ok:
            raise MalformedCheckpoint(f"json-text: bad element in data for {name!r}")
        try:
            arr = np.array(values, dtype=np.float64 if dtype.is_float else np.int64)
            arr = arr.astype(dtype.numpy) if dtype.is_float else _checked_int_cast(arr, dtype)
            return Tensor.from_array(arr.reshape(shape), dtype)
        except (ValueError, OverflowError) as exc:
            raise MalformedCheckpoint(f"json-text: {name!r}: {exc}") from exc

    def save(self, snapshot: ModelSnapshot) -> bytes:
        doc = {}
        for name, tensor in snapshot.items():
            if tensor.dtype not in _JSON_DTYPES:
                raise UnrepresentableDtype(
                    f"json-text cannot store {tensor.dtype.value} (group {name!r})"
                )
            doc[name] = {
                "dtype": tensor.dtype.value,
                "shape": list(tensor.shape),
                "data": tensor.array().reshape(-1).tolist(),
            }
        text = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return (text + "\n").encode("utf-8")


def _checked_int_cast(arr: np.ndarray, dtype: Dtype) -> np.ndarray:
    info = np.iinfo(dtype.numpy)
    if arr.size and (arr.min() < info.min or arr.max() > info.max):
        raise ValueError(f"value out of range for {dtype.value}")
    return arr.astype(dtype.numpy)


_REGISTRY: dict[str, CheckpointFormat] = {}


def register(fmt: CheckpointFormat) -> None:
    if not fmt.key:
        raise ValueError("checkpoint format needs a key")
    if fmt.key in _REGISTRY:
        raise ValueError(f"checkpoint format {fmt.key!r} already registered")
    _REGISTRY[fmt.key] = fmt


def get_format(key: str) -> CheckpointFormat:
    try:
        return _REGISTRY[key]
    except KeyError:
        raise UnknownFormat(
            f"unknown checkpoint format {key!r}; known: {sorted(_REGISTRY)}"
        ) from None


def registered() -> list[str]:
    return sorted(_REGISTRY)


def load_checkpoint(format_key: str, data: bytes) -> ModelSnapshot:
    return get_format(format_key).load(data)


def save_checkpoint(format_key: str, snapshot: ModelSnapshot) -> bytes:
    return get_format(format_key).save(snapshot)


def resolve_format_key(configured: str | None) -> str:
    """Environment override first, then the tracked-path configuration."""
    key = os.environ.get(ENV_CHECKPOINT_TYPE) or configured
    if not key:
        raise UnknownFormat(
            f"no checkpoint type configured; run 'theta track' or set {ENV_CHECKPOINT_TYPE}"
        )
    get_format(key)
    return key


register(FlatBinFormat())
register(JsonTextFormat())
