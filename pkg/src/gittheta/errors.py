"""Exception hierarchy shared by every gittheta module."""

from __future__ import annotations


class ThetaError(Exception):
    """Base class for all gittheta errors."""


class MalformedMetadata(ThetaError):
    pass


class UnsupportedVersion(ThetaError):
    pass


class InvalidTensor(ThetaError):
    pass


class UnknownFormat(ThetaError):
    pass


class MalformedCheckpoint(ThetaError):
    def __init__(self, message: str, offset: int | None = None) -> None:
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class UnrepresentableDtype(ThetaError):
    pass


class DuplicateLabel(ThetaError):
    pass


class CorruptContainer(ThetaError):
    """Container bytes failed validation.

    ``reason`` is one of ``"magic"``, ``"length"``, ``"digest"``, ``"order"``
    or ``"format"``.
    """

    def __init__(self, reason: str, message: str) -> None:
        super().__init__(f"{reason}: {message}")
        self.reason = reason


class ShapeMismatch(ThetaError):
    pass


class FactorsRequired(ThetaError):
    pass


class PriorValueUnavailable(ThetaError):
    pass


class BrokenChain(ThetaError):
    pass


class StorageFailure(ThetaError):
    pass


class ObjectMissing(ThetaError):
    def __init__(self, oid: str, group: str | None = None) -> None:
        where = f" (group {group!r})" if group else ""
        super().__init__(f"object {oid} not found locally or on any remote{where}")
        self.oid = oid
        self.group = group


class IntegrityFailure(ThetaError):
    pass


class InapplicableStrategy(ThetaError):
    pass


class AbortedByUser(ThetaError):
    pass


class NotARepository(ThetaError):
    pass


class HookConflict(ThetaError):
    pass
