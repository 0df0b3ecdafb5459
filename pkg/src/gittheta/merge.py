"""Three-way merging of model metadata, one parameter group at a time.

Groups that only one side touched merge automatically. The rest are
conflicts, resolved by a :class:`MergeStrategy` chosen from a menu (or from
``theta.mergeDefault`` when nobody is at the terminal).
"""

from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass
from typing import TextIO

import numpy as np

from . import lsh, updates
from .diff import same_version
from .errors import AbortedByUser, InapplicableStrategy
from .model import GroupMetadata, ModelMetadata, Tensor, UpdateKind
from .store import ObjectStore

MAX_ATTEMPTS = 4  # the first prompt plus three re-prompts

TensorLoader = Callable[[str, GroupMetadata], Tensor]


@dataclass(frozen=True)
class MergeConflict:
    name: str
    ancestor: GroupMetadata | None
    ours: GroupMetadata | None
    theirs: GroupMetadata | None


@dataclass(frozen=True)
class MergeStrategy:
    keyword: str
    summary: str
    applicable: Callable[[MergeConflict], bool]
    resolve: Callable[[MergeConflict, TensorLoader, ObjectStore], GroupMetadata | None]


def detect_conflicts(
    ancestor: ModelMetadata, ours: ModelMetadata, theirs: ModelMetadata
) -> tuple[dict[str, GroupMetadata | None], list[MergeConflict]]:
    """Split the union of group names into auto-resolved groups and conflicts.

    An auto-resolved value of ``None`` means the group is dropped.
    """
    resolved: dict[str, GroupMetadata | None] = {}
    conflicts: list[MergeConflict] = []
    names = ancestor.groups.keys() | ours.groups.keys() | theirs.groups.keys()
    for name in sorted(names):
        a = ancestor.groups.get(name)
        o = ours.groups.get(name)
        t = theirs.groups.get(name)
        if same_version(o, t):
            resolved[name] = o
        elif same_version(o, a):
            resolved[name] = t
        elif same_version(t, a):
            resolved[name] = o
        else:
            conflicts.append(MergeConflict(name, a, o, t))
    return resolved, conflicts


def _average_applicable(c: MergeConflict) -> bool:
    return (
        c.ours is not None
        and c.theirs is not None
        and c.ours.shape == c.theirs.shape
        and c.ours.dtype == c.theirs.dtype
    )


def average_tensors(a: Tensor, b: Tensor) -> Tensor:
    mean = (a.array().astype(np.float64) + b.array().astype(np.float64)) / 2.0
    return Tensor.from_array(updates.cast_from_f64(mean, a.dtype), a.dtype)


def store_dense(value: Tensor, store: ObjectStore) -> GroupMetadata:
    """Persist ``value`` as a fresh dense record."""
    return GroupMetadata(
        shape=value.shape,
        dtype=value.dtype,
        lsh=lsh.signature(value),
        update_kind=UpdateKind.DENSE,
        pointer=store.put_tensors(updates.write(updates.Dense(value))),
    )


def _resolve_average(c: MergeConflict, load: TensorLoader, store: ObjectStore) -> GroupMetadata:
    if not _average_applicable(c):
        raise InapplicableStrategy(f"cannot average group {c.name!r}")
    return store_dense(average_tensors(load(c.name, c.ours), load(c.name, c.theirs)), store)


BUILTIN_STRATEGIES: tuple[MergeStrategy, ...] = (
    MergeStrategy("ours", "Keep the change from the current branch.",
                  lambda c: True, lambda c, load, store: c.ours),
    MergeStrategy("theirs", "Take the change from the other branch.",
                  lambda c: True, lambda c, load, store: c.theirs),
    MergeStrategy("ancestor", "Discard both changes and keep the common ancestor's version.",
                  lambda c: True, lambda c, load, store: c.ancestor),
    MergeStrategy("average", "Average the parameters from both branches.",
                  _average_applicable, _resolve_average),
)


def strategy_map(strategies: Sequence[MergeStrategy] = BUILTIN_STRATEGIES) -> dict[str, MergeStrategy]:
    return {s.keyword: s for s in strategies}


def resolve(
    conflict: MergeConflict,
    keyword: str,
    load: TensorLoader,
    store: ObjectStore,
    strategies: Sequence[MergeStrategy] = BUILTIN_STRATEGIES,
) -> GroupMetadata | None:
    strategy = strategy_map(strategies).get(keyword)
    if strategy is None or not strategy.applicable(conflict):
        raise InapplicableStrategy(f"strategy {keyword!r} cannot resolve group {conflict.name!r}")
    return strategy.resolve(conflict, load, store)


def _describe(rec: GroupMetadata | None) -> str:
    if rec is None:
        return "absent"
    return f"{rec.dtype.value}[{','.join(map(str, rec.shape))}] ({rec.update_kind.value})"


def present_menu(
    conflicts: Sequence[MergeConflict],
    strategies: Sequence[MergeStrategy] = BUILTIN_STRATEGIES,
    stdin: TextIO | None = None,
    stdout: TextIO | None = None,
    *,
    interactive: bool = True,
    default: str | None = None,
) -> dict[str, str]:
    """Pick a strategy keyword per conflict.

    Only strategies applicable to a conflict are offered. Non-interactive runs
    use ``default`` for every conflict or abort when it is unset/inapplicable.
    """
    choices: dict[str, str] = {}
    for conflict in conflicts:
        offered = [s for s in strategies if s.applicable(conflict)]
        keywords = {s.keyword for s in offered}
        if not interactive:
            if default is None:
                raise AbortedByUser(
                    f"merge conflict in {conflict.name!r} and no theta.mergeDefault configured"
                )
            if default not in keywords:
                raise AbortedByUser(
                    f"theta.mergeDefault={default!r} cannot resolve {conflict.name!r}"
                )
            choices[conflict.name] = default
            continue
        assert stdin is not None and stdout is not None
        stdout.write(
            f"Conflict in parameter group {conflict.name!r}\n"
            f"  ancestor: {_describe(conflict.ancestor)}\n"
            f"  ours:     {_describe(conflict.ours)}\n"
            f"  theirs:   {_describe(conflict.theirs)}\n"
        )
        for s in offered:
            stdout.write(f"  {s.keyword:<10} {s.summary}\n")
        for _ in range(MAX_ATTEMPTS):
            stdout.write(f"strategy for {conflict.name}> ")
            stdout.flush()
            line = stdin.readline()
            if not line:
                raise AbortedByUser("input closed during merge resolution")
            answer = line.strip()
            if answer in keywords:
                choices[conflict.name] = answer
                break
            stdout.write(f"unknown choice {answer!r}; pick one of {', '.join(sorted(keywords))}\n")
        else:
            raise AbortedByUser(f"no valid strategy chosen for {conflict.name!r}")
    return choices


def merge_models(
    ancestor: ModelMetadata,
    ours: ModelMetadata,
    theirs: ModelMetadata,
    choose: Callable[[list[MergeConflict]], Mapping[str, str]],
    load: TensorLoader,
    store: ObjectStore,
    strategies: Sequence[MergeStrategy] = BUILTIN_STRATEGIES,
) -> tuple[ModelMetadata, list[MergeConflict]]:
    """Full three-way merge; ``choose`` maps conflicts to strategy keywords."""
    resolved, conflicts = detect_conflicts(ancestor, ours, theirs)
    if conflicts:
        picks = choose(conflicts)
        for conflict in conflicts:
            resolved[conflict.name] = resolve(conflict, picks[conflict.name], load, store, strategies)
    groups = {name: rec for name, rec in resolved.items() if rec is not None}
    return ModelMetadata(checkpoint_type=ours.checkpoint_type, groups=groups), conflicts
