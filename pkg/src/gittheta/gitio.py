"""Git plumbing access (via the ``git`` executable) and history lookup."""

from __future__ import annotations

import fnmatch
import logging
import os
import subprocess
import threading
from collections.abc import Iterator, Sequence
from pathlib import Path

from .errors import MalformedMetadata, NotARepository, PriorValueUnavailable, StorageFailure, UnsupportedVersion
from .model import GroupMetadata, ModelMetadata, decode_metadata
from .store import ObjectStore
from .updates import find_prior

log = logging.getLogger(__name__)

ZERO_OID = "0" * 40
EXTRA_HEADS = ("MERGE_HEAD", "ORIG_HEAD", "FETCH_HEAD", "CHERRY_PICK_HEAD")


class GitError(StorageFailure):
    pass


def git(args: Sequence[str], cwd: str | os.PathLike | None = None, *, input: bytes | None = None,
        check: bool = True) -> subprocess.CompletedProcess:
    proc = subprocess.run(["git", *args], cwd=cwd, input=input, capture_output=True)
    if check and proc.returncode != 0:
        raise GitError(f"git {' '.join(args)} failed: {proc.stderr.decode(errors='replace').strip()}")
    return proc


class Repo:
    """A Git working tree plus its theta directories and configuration."""

    def __init__(self, root: Path, git_dir: Path) -> None:
        self.root = root
        self.git_dir = git_dir
        self.theta_dir = git_dir / "theta"
        self._store: ObjectStore | None = None
        self._remote: tuple[ObjectStore | None] | None = None

    @classmethod
    def discover(cls, cwd: str | os.PathLike | None = None) -> Repo:
        proc = git(["rev-parse", "--show-toplevel", "--absolute-git-dir"], cwd=cwd, check=False)
        if proc.returncode != 0:
            raise NotARepository(f"not inside a Git repository: {os.path.abspath(cwd or '.')}")
        root, git_dir = proc.stdout.decode().splitlines()[:2]
        return cls(Path(root), Path(git_dir))

    def git(self, *args: str, input: bytes | None = None, check: bool = True) -> subprocess.CompletedProcess:
        return git(args, cwd=self.root, input=input, check=check)

    def out(self, *args: str) -> str:
        return self.git(*args).stdout.decode().strip()

    # -- config ---------------------------------------------------------------

    def config_get(self, key: str) -> str | None:
        proc = self.git("config", "--get", key, check=False)
        return proc.stdout.decode().rstrip("\n") if proc.returncode == 0 else None

    def config_set(self, key: str, value: str) -> None:
        self.git("config", key, value)

    def config_regexp(self, pattern: str) -> list[tuple[str, str]]:
        proc = self.git("config", "--get-regexp", pattern, check=False)
        pairs = []
        for line in proc.stdout.decode().splitlines():
            key, _, value = line.partition(" ")
            pairs.append((key, value))
        return pairs

    def checkpoint_type_for(self, path: str) -> str | None:
        exact = self.config_get(f"theta.track.{path}")
        if exact:
            return exact
        # Git lowercases the final key component, so match case-insensitively.
        for key, value in self.config_regexp(r"^theta\.track\."):
            pattern = key[len("theta.track."):]
            if fnmatch.fnmatch(path.lower(), pattern.lower()):
                return value
        return None

    # -- storage --------------------------------------------------------------

    @property
    def store(self) -> ObjectStore:
        if self._store is None:
            compress = (self.config_get("theta.compression") or "none") == "zlib"
            self._store = ObjectStore(self.theta_dir, compress=compress)
        return self._store

    def remote_store(self) -> ObjectStore | None:
        location = self.config_get("theta.remote")
        if not location:
            return None
        path = Path(os.path.expanduser(location))
        if not path.is_absolute():
            path = self.root / path
        return ObjectStore(path)

    def fetch(self, oid: str) -> bytes:
        if self.store.has(oid):
            return self.store.get(oid)
        if self._remote is None:
            # Looked up once per Repo: filter processes are short-lived.
            self._remote = (self.remote_store(),)
        remote = self._remote[0]
        return self.store.get(oid, [remote] if remote is not None else [])

    # -- objects and history ----------------------------------------------------

    def rev(self, name: str) -> str | None:
        proc = self.git("rev-parse", "--verify", "--quiet", f"{name}^{{commit}}", check=False)
        return proc.stdout.decode().strip() if proc.returncode == 0 else None

    def blob_at(self, rev: str, path: str) -> bytes | None:
        proc = self.git("cat-file", "blob", f"{rev}:{path}", check=False)
        return proc.stdout if proc.returncode == 0 else None

    def blobs(self, specs: Sequence[str]) -> list[bytes | None]:
        """Batch ``cat-file`` of ``<rev>:<path>`` specs; None where missing."""
        if not specs:
            return []
        proc = self.git("cat-file", "--batch", input="".join(f"{s}\n" for s in specs).encode())
        data = proc.stdout
        out: list[bytes | None] = []
        pos = 0
        for _ in specs:
            nl = data.index(b"\n", pos)
            header = data[pos:nl].split()
            pos = nl + 1
            if len(header) < 3 or header[1] != b"blob":
                out.append(None)
                if len(header) == 3:  # a non-blob object still has a body
                    pos += int(header[2]) + 1
                continue
            size = int(header[2])
            out.append(data[pos : pos + size])
            pos += size + 1
        return out

    def parents(self, commit: str) -> list[str]:
        return self.out("rev-list", "--parents", "-n", "1", commit).split()[1:]

    def metadata_at(self, rev: str, path: str) -> ModelMetadata | None:
        blob = self.blob_at(rev, path)
        return try_decode(blob)

    def tracked_files(self, commit: str) -> list[str]:
        """Files in ``commit`` whose ``filter`` attribute is ``theta``."""
        files = self.git("ls-tree", "-r", "-z", "--name-only", commit).stdout
        if not files:
            return []
        attrs = self.git("check-attr", "-z", "--stdin", "filter", input=files).stdout.split(b"\0")
        tracked = []
        for i in range(0, len(attrs) - 2, 3):
            path, _, value = attrs[i : i + 3]
            if value == b"theta":
                tracked.append(path.decode())
        return tracked


def try_decode(blob: bytes | None) -> ModelMetadata | None:
    if blob is None:
        return None
    try:
        return decode_metadata(blob)
    except (MalformedMetadata, UnsupportedVersion):
        return None


class GitHistoryProvider:
    """PriorResolver over the history of one metadata file.

    Prior records are located by the digest link stored in each incremental
    record. The first-parent history of ``start`` is searched first, then the
    index, then every ref (so records brought in by merges, or referenced
    while a checkout is still moving HEAD, are found too).
    """

    def __init__(self, repo: Repo, path: str, start: str = "HEAD") -> None:
        self.repo = repo
        self.path = path
        self.start = start
        self._lock = threading.Lock()
        self._index: dict[tuple[str, str], GroupMetadata] = {}
        self._names: set[str] = set()
        self._seen_blobs: set[bytes] = set()
        self._sources = self._version_sources()
        self._exhausted = False
        self._depth: int | None = None

    def _version_sources(self) -> Iterator[list[str]]:
        head = self.repo.rev(self.start)
        if head is not None:
            yield [f"{c}:{self.path}" for c in self._rev_list("--first-parent", head)]
        yield [f":{self.path}"]
        starts = ["--all"] + [r for r in (self.repo.rev(h) for h in EXTRA_HEADS) if r]
        if head is not None:
            starts.append(head)
        yield [f"{c}:{self.path}" for c in self._rev_list(*starts)]

    def _rev_list(self, *args: str) -> list[str]:
        proc = self.repo.git("rev-list", *args, "--", self.path, check=False)
        return proc.stdout.decode().split() if proc.returncode == 0 else []

    def _ingest(self, specs: list[str]) -> None:
        for blob in self.repo.blobs(specs):
            if blob is None or blob in self._seen_blobs:
                continue
            self._seen_blobs.add(blob)
            meta = try_decode(blob)
            if meta is None:
                continue
            for name, rec in meta.groups.items():
                self._index.setdefault((name, rec.digest()), rec)
                self._names.add(name)

    def add_version(self, meta: ModelMetadata) -> None:
        """Make records from a version not yet in Git (e.g. a merge side) findable."""
        with self._lock:
            for name, rec in meta.groups.items():
                self._index.setdefault((name, rec.digest()), rec)
                self._names.add(name)

    def previous(self, name: str, record: GroupMetadata) -> GroupMetadata:
        link = record.flags.get("prior")
        with self._lock:
            while link is not None and (name, link) not in self._index and not self._exhausted:
                try:
                    self._ingest(next(self._sources))
                except StopIteration:
                    self._exhausted = True
            try:
                return find_prior(name, record, self._index, known=name in self._names)
            except PriorValueUnavailable:
                raise PriorValueUnavailable(
                    f"group {name!r} in {self.path}: no earlier version in Git history"
                ) from None

    def fetch(self, oid: str) -> bytes:
        return self.repo.fetch(oid)

    def max_depth(self) -> int:
        if self._depth is None:
            count = self.repo.git("rev-list", "--count", "--all", "--", self.path, check=False)
            extra = len(self._seen_blobs) + 2
            self._depth = int(count.stdout.decode().strip() or 0) + extra if count.returncode == 0 else 10_000
        return self._depth
