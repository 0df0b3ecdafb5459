"""Installing theta's stanzas into Git hook scripts without clobbering them.

A stanza is appended to an existing hook only when the hook is a POSIX
shell script (or has no shebang, which Git runs with ``sh``) and does not end
with an unconditional ``exit``; anything else is reported, never rewritten.
"""

from __future__ import annotations

import os
import re
import stat
from pathlib import Path

from .errors import HookConflict

SHELLS = {"sh", "bash", "dash", "zsh", "ksh", "ash"}


def begin_marker(hook: str) -> str:
    return f"# >>> theta {hook} >>>"


def end_marker(hook: str) -> str:
    return f"# <<< theta {hook} <<<"


def stanza(hook: str, command: str) -> str:
    return f'{begin_marker(hook)}\n{command} {hook} "$@" || exit $?\n{end_marker(hook)}\n'


def _interpreter(first_line: str) -> str | None:
    if not first_line.startswith("#!"):
        return None
    parts = first_line[2:].split()
    if not parts:
        return None
    prog = os.path.basename(parts[0])
    if prog == "env":
        args = [p for p in parts[1:] if not p.startswith("-")]
        prog = os.path.basename(args[0]) if args else "env"
    return prog


def _ends_with_exit(text: str) -> bool:
    for line in reversed(text.splitlines()):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        return re.match(r"exec\b|exit\b", line) is not None
    return False


def install_hook(hooks_dir: Path, hook: str, command: str) -> str:
    """Add (or refresh) the theta stanza in ``hooks_dir/hook``.

    Returns ``"created"``, ``"appended"`` or ``"updated"``.
    """
    path = hooks_dir / hook
    block = stanza(hook, command)
    if not path.exists():
        hooks_dir.mkdir(parents=True, exist_ok=True)
        path.write_text("#!/bin/sh\n" + block)
        outcome = "created"
    else:
        text = path.read_text()
        begin, end = begin_marker(hook), end_marker(hook)
        if begin in text and end in text:
            start = text.index(begin)
            stop = text.index(end, start) + len(end)
            if stop < len(text) and text[stop] == "\n":
                stop += 1
            path.write_text(text[:start] + block + text[stop:])
            outcome = "updated"
        else:
            lines = text.splitlines()
            interp = _interpreter(lines[0]) if lines else None
            if interp is not None and interp not in SHELLS:
                raise HookConflict(
                    f"existing {hook} hook at {path} is a {interp} script; add "
                    f"'{command} {hook} \"$@\"' to it manually"
                )
            if _ends_with_exit(text):
                raise HookConflict(
                    f"existing {hook} hook at {path} exits before an appended stanza could run; "
                    f"add '{command} {hook} \"$@\"' to it manually"
                )
            sep = "" if text.endswith("\n") or not text else "\n"
            path.write_text(text + sep + block)
            outcome = "appended"
    mode = path.stat().st_mode
    path.chmod(mode | stat.S_IXUSR | stat.S_IXGRP | stat.S_IXOTH)
    return outcome
