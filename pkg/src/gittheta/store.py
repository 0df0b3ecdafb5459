"""Content-addressed blob storage in the Git LFS mould.

Layout under a store root (``.git/theta`` locally, any directory for a
remote)::

    objects/<oid[0:2]>/<oid[2:4]>/<oid>     write-once blobs, oid = sha256
    commits/<commit id>                     sorted oids added by that commit
"""

from __future__ import annotations

import hashlib
import os
import tempfile
from collections.abc import Iterable, Iterator, Sequence
from pathlib import Path

from . import serializer
from .errors import IntegrityFailure, ObjectMissing, StorageFailure
from .model import ObjectPointer, Tensor, is_oid


def oid_of(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


class ObjectStore:
    def __init__(self, root: str | os.PathLike, *, compress: bool = False) -> None:
        self.root = Path(root)
        self.compress = compress
        self.objects_dir = self.root / "objects"
        self.commits_dir = self.root / "commits"

    def __repr__(self) -> str:
        return f"ObjectStore({str(self.root)!r})"

    def path_for(self, oid: str) -> Path:
        if not is_oid(oid):
            raise ValueError(f"invalid object id {oid!r}")
        return self.objects_dir / oid[:2] / oid[2:4] / oid

    def has(self, oid: str) -> bool:
        return self.path_for(oid).is_file()

    def put(self, blob: bytes) -> ObjectPointer:
        oid = oid_of(blob)
        path = self.path_for(oid)
        if not path.is_file():
            try:
                _atomic_write(path, blob)
            except OSError as exc:
                raise StorageFailure(f"cannot write object {oid}: {exc}") from exc
        return ObjectPointer(oid, len(blob))

    def put_tensors(self, labeled: Iterable[tuple[str, Tensor]]) -> ObjectPointer:
        """Serialize labeled tensors with this store's compression setting and put them."""
        return self.put(serializer.serialize(labeled, compress=self.compress))

    def _read_verified(self, oid: str) -> bytes:
        try:
            blob = self.path_for(oid).read_bytes()
        except FileNotFoundError:
            raise ObjectMissing(oid) from None
        except OSError as exc:
            raise StorageFailure(f"cannot read object {oid}: {exc}") from exc
        if oid_of(blob) != oid:
            raise IntegrityFailure(f"object {oid} in {self.root} does not match its digest")
        return blob

    def get(self, oid: str, remotes: Sequence[ObjectStore] = ()) -> bytes:
        """Blob for ``oid``; local cache first, then each remote in order.

        A blob fetched from a remote is cached locally before returning.
        """
        if self.has(oid):
            return self._read_verified(oid)
        corrupt: IntegrityFailure | None = None
        for remote in remotes:
            if not remote.has(oid):
                continue
            try:
                blob = remote._read_verified(oid)
            except IntegrityFailure as exc:
                corrupt = exc
                continue
            self.put(blob)
            return blob
        if corrupt is not None:
            raise corrupt
        raise ObjectMissing(oid)

    def oids(self) -> Iterator[str]:
        if not self.objects_dir.is_dir():
            return
        for path in sorted(self.objects_dir.glob("*/*/*")):
            if is_oid(path.name):
                yield path.name

    def size_on_disk(self) -> int:
        return sum(self.path_for(oid).stat().st_size for oid in self.oids())

    # -- commit index -------------------------------------------------------

    def record_commit(self, commit_id: str, oids: Iterable[str]) -> Path:
        unique = sorted(set(oids))
        for oid in unique:
            if not is_oid(oid):
                raise ValueError(f"invalid object id {oid!r}")
        path = self.commits_dir / commit_id
        try:
            _atomic_write(path, "".join(f"{oid}\n" for oid in unique).encode("ascii"))
        except OSError as exc:
            raise StorageFailure(f"cannot write commit index {path}: {exc}") from exc
        return path

    def commit_objects(self, commit_id: str) -> list[str] | None:
        path = self.commits_dir / commit_id
        if not path.is_file():
            return None
        return path.read_text("ascii").split()

    def sync(self, commit_ids: Iterable[str], remote: ObjectStore) -> int:
        """Upload every object the given commits reference; returns uploads."""
        wanted: set[str] = set()
        for commit in commit_ids:
            oids = self.commit_objects(commit)
            if oids is None:
                raise StorageFailure(f"no commit index for {commit}; run the post-commit hook")
            wanted.update(oids)
        return self.push_objects(wanted, remote)

    def push_objects(self, oids: Iterable[str], remote: ObjectStore) -> int:
        uploaded = 0
        for oid in sorted(set(oids)):
            if remote.has(oid):
                continue
            if not self.has(oid):
                raise ObjectMissing(oid)
            remote.put(self._read_verified(oid))
            uploaded += 1
        return uploaded
