"""Structural diffs between two model metadata documents."""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .model import GroupMetadata, ModelMetadata


class ChangeStatus(enum.Enum):
    ADDED = "A"
    MODIFIED = "M"
    REMOVED = "D"


@dataclass(frozen=True)
class GroupChange:
    name: str
    status: ChangeStatus
    old_shape: tuple[int, ...] | None = None
    new_shape: tuple[int, ...] | None = None
    old_dtype: str | None = None
    new_dtype: str | None = None

    def line(self) -> str:
        parts = [self.status.value, self.name]
        if self.status is ChangeStatus.MODIFIED:
            if self.old_shape != self.new_shape:
                parts.append(f"shape {_fmt(self.old_shape)}→{_fmt(self.new_shape)}")
            if self.old_dtype != self.new_dtype:
                parts.append(f"dtype {self.old_dtype}→{self.new_dtype}")
        return " ".join(parts)


def _fmt(shape: tuple[int, ...] | None) -> str:
    return "[" + ",".join(str(s) for s in shape or ()) + "]"


def same_version(a: GroupMetadata | None, b: GroupMetadata | None) -> bool:
    """Metadata-only equality: signature, shape and dtype (absence == absence)."""
    if a is None or b is None:
        return a is b
    return a.lsh == b.lsh and a.shape == b.shape and a.dtype == b.dtype


def diff(old: ModelMetadata, new: ModelMetadata) -> list[GroupChange]:
    changes = []
    for name in sorted(old.groups.keys() | new.groups.keys()):
        a, b = old.groups.get(name), new.groups.get(name)
        if a is None:
            changes.append(GroupChange(name, ChangeStatus.ADDED, new_shape=b.shape, new_dtype=b.dtype.value))
        elif b is None:
            changes.append(GroupChange(name, ChangeStatus.REMOVED, old_shape=a.shape, old_dtype=a.dtype.value))
        elif not same_version(a, b):
            changes.append(GroupChange(
                name, ChangeStatus.MODIFIED, a.shape, b.shape, a.dtype.value, b.dtype.value
            ))
    return changes


def format_report(changes: list[GroupChange]) -> str:
    return "".join(change.line() + "\n" for change in changes)
