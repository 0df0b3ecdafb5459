"""The operations behind each ``theta`` subcommand.

Functions here take explicit byte streams and paths so they can be driven
from tests without spawning processes; :mod:`gittheta.cli` wires them to
argv, stdin and stdout.
"""

from __future__ import annotations

import logging
import os
import re
import shlex
import sys
from collections.abc import Iterable
from pathlib import Path
from typing import TextIO

from . import checkpoints, pipeline, updates
from .diff import diff, format_report
from .errors import AbortedByUser, MalformedMetadata, StorageFailure, ThetaError
from .gitio import ZERO_OID, GitHistoryProvider, Repo, try_decode
from .hooks import install_hook
from .merge import merge_models, present_menu
from .model import GroupMetadata, ModelMetadata, decode_metadata, encode_metadata, looks_like_metadata

log = logging.getLogger(__name__)

HOOKS = ("post-commit", "pre-push")
NULL_PATH = "/dev/null"


def theta_command() -> str:
    """Shell command that runs this installation of theta."""
    return f"{shlex.quote(sys.executable)} -m gittheta"


def attributes_line(path: str) -> str:
    return f"{path} filter=theta diff=theta merge=theta"


# -- setup ------------------------------------------------------------------

def cmd_install(repo: Repo, command: str | None = None) -> dict[str, str]:
    """Register the filter, diff and merge drivers, and the two hooks."""
    command = command or theta_command()
    repo.config_set("filter.theta.clean", f"{command} filter-clean %f")
    repo.config_set("filter.theta.smudge", f"{command} filter-smudge %f")
    repo.config_set("filter.theta.required", "true")
    repo.config_set("diff.theta.command", f"{command} diff")
    repo.config_set("merge.theta.name", "theta parameter-group merge")
    repo.config_set("merge.theta.driver", f"{command} merge %O %A %B %P")
    hooks_dir = Path(repo.out("rev-parse", "--git-path", "hooks"))
    if not hooks_dir.is_absolute():
        hooks_dir = repo.root / hooks_dir
    return {hook: install_hook(hooks_dir, hook, command) for hook in HOOKS}


_CONFIG_VAR = re.compile(r"[A-Za-z][A-Za-z0-9-]*")


def cmd_track(repo: Repo, path: str, checkpoint_type: str) -> bool:
    """Track ``path``; returns True when ``.gitattributes`` gained a line."""
    checkpoints.get_format(checkpoint_type)
    if not path or any(c.isspace() for c in path):
        raise ValueError(f"cannot track {path!r}: paths with whitespace are not supported")
    variable = f"track.{path}".rsplit(".", 1)[1]
    if not _CONFIG_VAR.fullmatch(variable):
        raise ValueError(
            f"cannot track {path!r}: Git config key theta.track.{path} is invalid because "
            f"{variable!r} is not a valid variable name (letters, digits and '-' only); "
            "rename the file or give it an extension"
        )
    repo.config_set(f"theta.track.{path}", checkpoint_type)
    attrs = repo.root / ".gitattributes"
    line = attributes_line(path)
    existing = attrs.read_text().splitlines() if attrs.exists() else []
    if line in existing:
        return False
    text = attrs.read_text() if attrs.exists() else ""
    if text and not text.endswith("\n"):
        text += "\n"
    attrs.write_text(text + line + "\n")
    return True


# -- filters ------------------------------------------------------------------

def _prior_metadata(repo: Repo, path: str) -> tuple[ModelMetadata | None, ModelMetadata | None]:
    """(previous version, staged version): HEAD falling back to the index, and the index."""
    head = repo.metadata_at("HEAD", path) if repo.rev("HEAD") else None
    staged = try_decode(repo.blob_at("", path))  # ":path" is the index entry
    return (head if head is not None else staged), staged


def filter_clean(repo: Repo, path: str, data: bytes, *, workers: int | None = None) -> bytes:
    if looks_like_metadata(data):
        meta = try_decode(data)
        if meta is not None:
            return encode_metadata(meta)
    prior, staged = _prior_metadata(repo, path)
    # Git config is not cloned; the committed metadata remembers the type.
    configured = repo.checkpoint_type_for(path) or (prior.checkpoint_type if prior else None)
    fmt = checkpoints.resolve_format_key(configured)
    snapshot = checkpoints.load_checkpoint(fmt, data)
    requested = updates.parse_kind(os.environ.get(updates.ENV_UPDATE_TYPE))
    side_load = None
    data_path = os.environ.get(updates.ENV_UPDATE_DATA)
    if data_path:
        side_path = Path(data_path)
        if not side_path.is_absolute():
            side_path = repo.root / side_path
        side_load = updates.side_loaded_payloads(
            checkpoints.load_checkpoint(fmt, side_path.read_bytes())
        )
    meta = pipeline.clean(
        snapshot, fmt, prior, repo.store, GitHistoryProvider(repo, path),
        requested=requested, side_load=side_load, workers=workers, staged=staged,
    )
    return encode_metadata(meta)


def filter_smudge(repo: Repo, path: str, data: bytes, *, workers: int | None = None) -> bytes:
    if not looks_like_metadata(data):
        return data  # committed before the path was tracked
    meta = decode_metadata(data)
    resolver = GitHistoryProvider(repo, path)
    resolver.add_version(meta)
    return pipeline.smudge(meta, resolver, workers=workers)


# -- drivers ------------------------------------------------------------------

def driver_merge(
    repo: Repo,
    ancestor_path: str,
    ours_path: str,
    theirs_path: str,
    path: str | None = None,
    *,
    stdin: TextIO | None = None,
    stdout: TextIO | None = None,
    interactive: bool | None = None,
) -> int:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    if interactive is None:
        interactive = stdin.isatty()
    sides = []
    for label, file in (("ancestor", ancestor_path), ("ours", ours_path), ("theirs", theirs_path)):
        blob = Path(file).read_bytes()
        if label == "ancestor" and not blob.strip():
            sides.append(None)
            continue
        try:
            sides.append(decode_metadata(blob))
        except ThetaError as exc:
            print(f"theta merge: {label} version is not theta metadata: {exc}", file=sys.stderr)
            return 1
    ancestor, ours, theirs = sides
    if ancestor is None:
        ancestor = ModelMetadata(checkpoint_type=ours.checkpoint_type, groups={})

    resolver = GitHistoryProvider(repo, path) if path else updates.MemoryHistory([], repo.fetch)
    for meta in (ancestor, ours, theirs):
        resolver.add_version(meta)

    def load(name: str, record: GroupMetadata):
        return updates.reconstruct(record, name, resolver)

    def choose(conflicts):
        return present_menu(conflicts, stdin=stdin, stdout=stdout, interactive=interactive,
                            default=repo.config_get("theta.mergeDefault"))

    try:
        merged, _ = merge_models(ancestor, ours, theirs, choose, load, repo.store)
    except AbortedByUser as exc:
        print(f"theta merge: {exc}", file=sys.stderr)
        return 1
    Path(ours_path).write_bytes(encode_metadata(merged))
    return 0


def _read_side(file: str) -> bytes | ModelMetadata | None:
    if file == NULL_PATH:
        return None
    blob = Path(file).read_bytes()
    return decode_metadata(blob) if looks_like_metadata(blob) else blob


def _describe_side(repo: Repo, path: str, blob: bytes, fallback: str | None) -> ModelMetadata:
    # A smudged working-tree copy: describe the checkpoint itself.
    fmt = checkpoints.resolve_format_key(repo.checkpoint_type_for(path) or fallback)
    try:
        snapshot = checkpoints.load_checkpoint(fmt, blob)
    except ThetaError as exc:
        raise MalformedMetadata(f"{path}: neither theta metadata nor a {fmt} checkpoint") from exc
    return pipeline.describe(snapshot, fmt)


def driver_diff(repo: Repo, args: list[str]) -> str:
    """Report for Git's external-diff arguments (7, or 1 for unmerged paths)."""
    if len(args) == 1:
        return f"* {args[0]}: unmerged\n"
    if len(args) < 7:
        raise ValueError(f"expected 7 external-diff arguments, got {len(args)}")
    path, old_file, _, _, new_file, _, _ = args[:7]
    sides = [_read_side(old_file), _read_side(new_file)]
    known = [s.checkpoint_type for s in sides if isinstance(s, ModelMetadata)]
    fallback = known[0] if known else None
    metas = []
    for side in sides:
        if side is None:
            metas.append(ModelMetadata(checkpoint_type="", groups={}))
        elif isinstance(side, ModelMetadata):
            metas.append(side)
        else:
            metas.append(_describe_side(repo, path, side, fallback))
    return format_report(diff(metas[0], metas[1]))


# -- hooks ------------------------------------------------------------------------

def _metadata_oids(repo: Repo, commit: str) -> set[str]:
    oids: set[str] = set()
    for path in repo.tracked_files(commit):
        meta = repo.metadata_at(commit, path)
        if meta is not None:
            oids.update(rec.pointer.oid for rec in meta.groups.values())
    return oids


def commit_new_objects(repo: Repo, commit: str) -> set[str]:
    """Objects referenced by ``commit``'s metadata but by none of its parents'."""
    new = _metadata_oids(repo, commit)
    for parent in repo.parents(commit):
        new -= _metadata_oids(repo, parent)
    return new


def hook_post_commit(repo: Repo, commit: str = "HEAD") -> list[str]:
    sha = repo.rev(commit)
    if sha is None:
        raise StorageFailure(f"cannot resolve {commit}")
    oids = sorted(commit_new_objects(repo, sha))
    repo.store.record_commit(sha, oids)
    return oids


def pushed_commits(repo: Repo, remote_name: str, ref_lines: Iterable[str]) -> list[str]:
    """Commits the push will send, per Git's pre-push stdin lines."""
    commits: list[str] = []
    seen: set[str] = set()
    saw_line = False
    for line in ref_lines:
        parts = line.split()
        if len(parts) != 4:
            continue
        saw_line = True
        _, local_sha, _, remote_sha = parts
        if local_sha == ZERO_OID:
            continue  # deleting a remote ref sends nothing
        if remote_sha == ZERO_OID or repo.rev(remote_sha) is None:
            revs = ["rev-list", local_sha, "--not", f"--remotes={remote_name}"]
        else:
            revs = ["rev-list", f"{remote_sha}..{local_sha}"]
        for sha in repo.out(*revs).split():
            if sha not in seen:
                seen.add(sha)
                commits.append(sha)
    if not saw_line:
        # Another hook earlier in the script consumed stdin.
        for sha in repo.out("rev-list", "--branches", "--not", f"--remotes={remote_name}").split():
            if sha not in seen:
                seen.add(sha)
                commits.append(sha)
    return commits


def hook_pre_push(repo: Repo, remote_name: str, ref_lines: Iterable[str]) -> int:
    """Upload the objects of every pushed commit; returns the upload count."""
    commits = pushed_commits(repo, remote_name, ref_lines)
    for sha in commits:
        if repo.store.commit_objects(sha) is None:
            repo.store.record_commit(sha, commit_new_objects(repo, sha))
    wanted = {oid for sha in commits for oid in repo.store.commit_objects(sha) or ()}
    if not wanted:
        return 0
    remote = repo.remote_store()
    if remote is None:
        raise StorageFailure(
            "theta.remote is not set; run 'git config theta.remote <directory>' before pushing models"
        )
    return repo.store.push_objects(wanted, remote)
