"""Checkpoint <-> metadata conversion shared by the Git filters and the bench."""

from __future__ import annotations

import logging
import os
import threading
from collections.abc import Callable, Mapping
from concurrent.futures import ThreadPoolExecutor

from . import checkpoints, lsh, updates
from .errors import ObjectMissing
from .model import GroupMetadata, ModelMetadata, ModelSnapshot, ObjectPointer, Tensor, UpdateKind
from .store import ObjectStore, oid_of

log = logging.getLogger(__name__)


def default_workers() -> int:
    return max(1, min(32, os.cpu_count() or 1))


def _parallel_map(fn: Callable, items: list, workers: int | None) -> list:
    workers = workers or default_workers()
    if workers == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


class _PriorValue:
    """Lazily reconstructed previous value of one group."""

    def __init__(self, name: str, record: GroupMetadata, resolver: updates.PriorResolver) -> None:
        self._args = (record, name, resolver)
        self._value: Tensor | None = None
        self._lock = threading.Lock()

    def __call__(self) -> Tensor:
        with self._lock:
            if self._value is None:
                self._value = updates.reconstruct(*self._args)
            return self._value


def clean_group(
    name: str,
    tensor: Tensor,
    prev: GroupMetadata | None,
    store: ObjectStore,
    resolver: updates.PriorResolver,
    *,
    requested: UpdateKind | str = updates.AUTO,
    side_load: updates.LowRank | updates.ScaleVector | None = None,
    staged: GroupMetadata | None = None,
) -> GroupMetadata:
    """Metadata for one group, storing a new payload only if it changed.

    ``staged`` is the record already in the index, if it differs from
    ``prev``: Git re-runs the clean filter on staged files (e.g. to refresh
    racily-clean index entries), and that must reproduce the staged record
    rather than re-deriving a different update against ``prev``.
    """
    sig = lsh.signature(tensor)
    if staged is not None and staged != prev:
        staged_value = _PriorValue(name, staged, resolver)
        if lsh.compare(staged, tensor, staged_value, new_signature=sig) is lsh.Verdict.UNCHANGED:
            return staged
    prior_value = _PriorValue(name, prev, resolver) if prev is not None else None
    if prev is not None:
        verdict = lsh.compare(prev, tensor, prior_value, new_signature=sig)
        if verdict is lsh.Verdict.UNCHANGED:
            if side_load is not None:
                log.warning("group %s is unchanged; ignoring its side-loaded update", name)
            return prev

    comparable = prev is not None and prev.shape == tensor.shape and prev.dtype == tensor.dtype
    if not comparable and side_load is None:
        # New or reshaped groups have nothing to diff against.
        requested = UpdateKind.DENSE
    base = prior_value() if comparable and requested != UpdateKind.DENSE else None
    if side_load is not None and base is None and prior_value is not None:
        base = prior_value()
    kind, payload = updates.extract(base, tensor, requested, side_load=side_load)

    pointer = store.put_tensors(updates.write(payload))
    if kind == UpdateKind.DENSE:
        return GroupMetadata(tensor.shape, tensor.dtype, sig, kind, pointer)
    result = updates.apply_update(payload, base)
    if result.data != tensor.data:
        if not updates.reconstructs(result, tensor):
            log.warning("group %s: stored %s update does not reproduce the checkpoint value",
                        name, kind.value)
        sig = lsh.signature(result)
    flags = {"prior": prev.digest(), **updates.payload_flags(payload, len(base.shape))}
    return GroupMetadata(result.shape, result.dtype, sig, kind, pointer, flags)


def clean(
    snapshot: ModelSnapshot,
    checkpoint_type: str,
    prior: ModelMetadata | None,
    store: ObjectStore,
    resolver: updates.PriorResolver,
    *,
    requested: UpdateKind | str = updates.AUTO,
    side_load: Mapping[str, updates.LowRank | updates.ScaleVector] | None = None,
    workers: int | None = None,
    staged: ModelMetadata | None = None,
) -> ModelMetadata:
    side_load = side_load or {}
    unknown = set(side_load) - set(snapshot)
    if unknown:
        log.warning("update data names groups not in the checkpoint: %s", sorted(unknown))
    prev_groups = prior.groups if prior is not None else {}
    staged_groups = staged.groups if staged is not None else {}

    def one(item: tuple[str, Tensor]) -> tuple[str, GroupMetadata]:
        name, tensor = item
        return name, clean_group(
            name, tensor, prev_groups.get(name), store, resolver,
            requested=requested, side_load=side_load.get(name), staged=staged_groups.get(name),
        )

    groups = dict(_parallel_map(one, list(snapshot.items()), workers))
    return ModelMetadata(checkpoint_type=checkpoint_type, groups=groups)


def materialize(
    meta: ModelMetadata, resolver: updates.PriorResolver, *, workers: int | None = None
) -> ModelSnapshot:
    """Reconstruct every group's current value."""

    def one(item: tuple[str, GroupMetadata]) -> tuple[str, Tensor]:
        name, record = item
        try:
            return name, updates.reconstruct(record, name, resolver)
        except ObjectMissing as exc:
            raise ObjectMissing(exc.oid, name) from None

    return ModelSnapshot(_parallel_map(one, list(meta.groups.items()), workers))


def smudge(meta: ModelMetadata, resolver: updates.PriorResolver, *, workers: int | None = None) -> bytes:
    return checkpoints.save_checkpoint(meta.checkpoint_type, materialize(meta, resolver, workers=workers))


def describe(snapshot: ModelSnapshot, checkpoint_type: str) -> ModelMetadata:
    """Metadata view of a checkpoint without storing anything (for diffs).

    Pointers are placeholders; only shape, dtype and signature are meaningful.
    """
    placeholder = ObjectPointer(oid_of(b""), 0)
    groups = {
        name: GroupMetadata(t.shape, t.dtype, lsh.signature(t), UpdateKind.DENSE, placeholder)
        for name, t in snapshot.items()
    }
    return ModelMetadata(checkpoint_type=checkpoint_type, groups=groups)
