"""``theta`` command line: Git filter, driver and hook entry points."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import bench, checkpoints, commands
from .errors import ThetaError
from .gitio import Repo

log = logging.getLogger("gittheta")


def _install(args: argparse.Namespace) -> int:
    outcomes = commands.cmd_install(Repo.discover(), args.command)
    for hook, outcome in outcomes.items():
        print(f"{hook} hook {outcome}")
    print("theta filter, diff and merge drivers configured")
    return 0


def _track(args: argparse.Namespace) -> int:
    repo = Repo.discover()
    added = commands.cmd_track(repo, args.path, args.checkpoint_type)
    print(f"tracking {args.path} as {args.checkpoint_type}" + ("" if added else " (already tracked)"))
    return 0


def _filter(fn):
    def run(args: argparse.Namespace) -> int:
        data = sys.stdin.buffer.read()
        out = fn(Repo.discover(), args.path, data)
        sys.stdout.buffer.write(out)
        sys.stdout.buffer.flush()
        return 0
    return run


def _blob_filter(fn):
    def run(args: argparse.Namespace) -> int:
        sys.stdout.buffer.write(fn(Repo.discover(), sys.stdin.buffer.read()))
        sys.stdout.buffer.flush()
        return 0
    return run


def _merge(args: argparse.Namespace) -> int:
    return commands.driver_merge(Repo.discover(), args.ancestor, args.ours, args.theirs, args.path)


def _diff(args: argparse.Namespace) -> int:
    sys.stdout.write(commands.driver_diff(Repo.discover(), args.args))
    return 0


def _post_commit(args: argparse.Namespace) -> int:
    oids = commands.hook_post_commit(Repo.discover())
    log.info("recorded %d new objects for HEAD", len(oids))
    return 0


def _pre_push(args: argparse.Namespace) -> int:
    lines = [] if sys.stdin.isatty() else sys.stdin.read().splitlines()
    uploaded = commands.hook_pre_push(Repo.discover(), args.remote_name, lines)
    if uploaded:
        print(f"theta: uploaded {uploaded} objects", file=sys.stderr)
    return 0


def _bench(args: argparse.Namespace) -> int:
    cfg = bench.BenchConfig(
        groups=args.groups, elements=args.elements, sparsity=args.sparsity, rank=args.rank,
        seed=args.seed, dtype=args.dtype, workdir=args.workdir, keep=args.keep,
    )
    result = bench.run_bench(cfg, log=lambda msg: print(msg, file=sys.stderr))
    sys.stdout.write(result.table())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="theta", description="Version control for model checkpoints inside Git."
    )
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging")
    sub = parser.add_subparsers(dest="cmd", required=True, metavar="COMMAND")

    p = sub.add_parser("install", help="configure the filter, drivers and hooks in this repository")
    p.add_argument("--command", help="command Git should run for theta (default: this interpreter)")
    p.set_defaults(func=_install)

    p = sub.add_parser("track", help="track a checkpoint path (pattern) with theta")
    p.add_argument("path")
    p.add_argument("checkpoint_type", nargs="?",
                   default=os.environ.get(checkpoints.ENV_CHECKPOINT_TYPE, "flat-bin"),
                   help=f"one of: {', '.join(checkpoints.registered())} (default flat-bin)")
    p.set_defaults(func=_track)

    p = sub.add_parser("filter-clean", help="Git clean filter: checkpoint on stdin, metadata out")
    p.add_argument("path")
    p.set_defaults(func=_filter(commands.filter_clean))

    p = sub.add_parser("filter-smudge", help="Git smudge filter: metadata on stdin, checkpoint out")
    p.add_argument("path")
    p.set_defaults(func=_filter(commands.filter_smudge))

    p = sub.add_parser("merge", help="Git merge driver (%%O %%A %%B %%P)")
    p.add_argument("ancestor")
    p.add_argument("ours")
    p.add_argument("theirs")
    p.add_argument("path", nargs="?")
    p.set_defaults(func=_merge)

    p = sub.add_parser("diff", help="Git external diff driver (7 arguments)")
    p.add_argument("args", nargs="+")
    p.set_defaults(func=_diff)

    p = sub.add_parser("post-commit", help="post-commit hook: index objects added by HEAD")
    p.set_defaults(func=_post_commit)

    p = sub.add_parser("pre-push", help="pre-push hook: upload objects of pushed commits")
    p.add_argument("remote_name")
    p.add_argument("remote_url", nargs="?")
    p.set_defaults(func=_pre_push)

    p = sub.add_parser("bench", help="compare whole-checkpoint storage against theta")
    p.add_argument("--groups", type=int, default=8, help="parameter groups (default 8)")
    p.add_argument("--elements", type=int, default=1 << 17, help="elements per group")
    p.add_argument("--sparsity", type=float, default=0.001,
                   help="fraction of elements changed by the sparse commit")
    p.add_argument("--rank", type=int, default=4, help="rank of the side-loaded update")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", default="f64", choices=["f32", "f64"])
    p.add_argument("--workdir", type=Path, help="scratch directory (default: a temp dir)")
    p.add_argument("--keep", action="store_true", help="keep the scratch repositories")
    p.set_defaults(func=_bench)

    # Filters for the bench's whole-checkpoint control repository.
    p = sub.add_parser("blob-clean")
    p.add_argument("path", nargs="?")
    p.set_defaults(func=_blob_filter(bench.blob_clean))
    p = sub.add_parser("blob-smudge")
    p.add_argument("path", nargs="?")
    p.set_defaults(func=_blob_filter(bench.blob_smudge))
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="theta: %(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (ThetaError, ValueError, OSError) as exc:
        print(f"theta {args.cmd}: error: {exc}", file=sys.stderr)
        return 1
