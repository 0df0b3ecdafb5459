"""Side-by-side storage and speed benchmark: whole-checkpoint blobs vs theta.

Two scratch repositories replay the same sequence of checkpoints. The blob
repository stores each staged checkpoint whole in an object store (the Git LFS
model); the theta repository runs the full clean/smudge pipeline. Each commit
reports the ``git add`` wall time, the bytes it added to the store, and the
time to check the checkpoint back out.
"""

from __future__ import annotations

import os
import shutil
import subprocess
import sys
import tempfile
import time
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoints, updates
from .commands import cmd_install, cmd_track, theta_command
from .gitio import Repo, git
from .merge import average_tensors
from .model import Dtype, ModelSnapshot, Tensor

MODEL = "model.bin"
LORA_DATA = "lora-update.bin"
BLOB_POINTER = b"theta-blob-v1\n"
SENTINELS = "sentinels"


@dataclass
class BenchConfig:
    groups: int = 8
    elements: int = 1 << 17  # per group
    sparsity: float = 0.001
    rank: int = 4
    seed: int = 0
    dtype: str = "f64"
    workdir: Path | None = None
    keep: bool = False


@dataclass
class StepResult:
    name: str
    description: str
    add_seconds: dict[str, float] = field(default_factory=dict)
    checkout_seconds: dict[str, float] = field(default_factory=dict)
    new_bytes: dict[str, int] = field(default_factory=dict)
    commit: dict[str, str] = field(default_factory=dict)


@dataclass
class BenchResult:
    config: BenchConfig
    steps: list[StepResult]
    total_bytes: dict[str, int]
    seconds: float

    def table(self) -> str:
        head = (f"{'commit':<10} {'blob add s':>10} {'theta add s':>11} {'blob co s':>9} "
                f"{'theta co s':>10} {'blob bytes':>12} {'theta bytes':>12}  description")
        rows = [head, "-" * len(head)]
        for s in self.steps:
            rows.append(
                f"{s.name:<10} {s.add_seconds['blob']:>10.3f} {s.add_seconds['theta']:>11.3f} "
                f"{s.checkout_seconds['blob']:>9.3f} {s.checkout_seconds['theta']:>10.3f} "
                f"{s.new_bytes['blob']:>12,} {s.new_bytes['theta']:>12,}  {s.description}"
            )
        rows.append("-" * len(head))
        rows.append(f"{'total':<10} {'':>10} {'':>11} {'':>9} {'':>10} "
                    f"{self.total_bytes['blob']:>12,} {self.total_bytes['theta']:>12,}")
        ratio = self.total_bytes["theta"] / max(1, self.total_bytes["blob"])
        rows.append(f"theta store is {ratio:.1%} of blob store; wall time {self.seconds:.1f}s")
        return "\n".join(rows) + "\n"


# -- blob-mode filters (the whole-checkpoint control) -------------------------

def blob_clean(repo: Repo, data: bytes) -> bytes:
    if data.startswith(BLOB_POINTER):
        return data
    ptr = repo.store.put(data)
    return BLOB_POINTER + f"oid {ptr.oid}\nsize {ptr.size}\n".encode()


def blob_smudge(repo: Repo, data: bytes) -> bytes:
    if not data.startswith(BLOB_POINTER):
        return data
    fields = dict(line.split(" ", 1) for line in data[len(BLOB_POINTER):].decode().splitlines())
    return repo.fetch(fields["oid"])


# -- synthetic workload ---------------------------------------------------------

def _shape(elements: int) -> tuple[int, ...]:
    cols = 512
    return (elements // cols, cols) if elements % cols == 0 and elements >= cols else (elements,)


def _base_model(cfg: BenchConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    dtype = Dtype(cfg.dtype).numpy
    model = {}
    for g in range(cfg.groups):
        model[f"layer{g:02d}.weight"] = rng.standard_normal(_shape(cfg.elements)).astype(dtype)
    model[SENTINELS] = rng.standard_normal(16).astype(dtype)
    return model


def _snapshot(model: dict[str, np.ndarray]) -> ModelSnapshot:
    return ModelSnapshot((k, Tensor.from_array(v)) for k, v in model.items())


def _fine_tune(model: dict[str, np.ndarray], rng: np.random.Generator, scale: float) -> dict:
    return {k: (v + scale * rng.standard_normal(v.shape)).astype(v.dtype) for k, v in model.items()}


class _Repos:
    def __init__(self, root: Path) -> None:
        self.root = root
        self.repos: dict[str, Repo] = {}
        cmd = theta_command()
        for mode in ("blob", "theta"):
            path = root / mode
            path.mkdir(parents=True)
            git(["init", "-q", "-b", "main"], cwd=path)
            repo = Repo.discover(path)
            for key, value in (("user.name", "theta bench"), ("user.email", "bench@localhost"),
                               ("commit.gpgsign", "false"), ("gc.auto", "0")):
                repo.config_set(key, value)
            if mode == "theta":
                cmd_install(repo, cmd)
                cmd_track(repo, MODEL, "flat-bin")
                repo.config_set("theta.mergeDefault", "average")
            else:
                repo.config_set("filter.blob.clean", f"{cmd} blob-clean %f")
                repo.config_set("filter.blob.smudge", f"{cmd} blob-smudge %f")
                repo.config_set("filter.blob.required", "true")
                (path / ".gitattributes").write_text(f"{MODEL} filter=blob\n")
            (path / ".gitignore").write_text(f"{LORA_DATA}\n")
            repo.git("add", ".gitattributes", ".gitignore")
            repo.git("commit", "-q", "-m", "setup")
            self.repos[mode] = repo

    def store_bytes(self, mode: str) -> int:
        return self.repos[mode].store.size_on_disk()


def _write(repo: Repo, model: dict[str, np.ndarray]) -> None:
    (repo.root / MODEL).write_bytes(checkpoints.save_checkpoint("flat-bin", _snapshot(model)))


def _timed(fn: Callable[[], object]) -> float:
    start = time.perf_counter()
    fn()
    return time.perf_counter() - start


def run_bench(cfg: BenchConfig | None = None, log: Callable[[str], None] | None = None) -> BenchResult:
    cfg = cfg or BenchConfig()
    log = log or (lambda msg: None)
    started = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    root = Path(cfg.workdir) if cfg.workdir else Path(tempfile.mkdtemp(prefix="theta-bench-"))
    root.mkdir(parents=True, exist_ok=True)
    try:
        repos = _Repos(root)
        steps: list[StepResult] = []
        env_base = dict(os.environ)

        def commit(name: str, description: str, model: dict, *,
                   lora: ModelSnapshot | None = None) -> None:
            step = StepResult(name, description)
            for mode, repo in repos.repos.items():
                before = repos.store_bytes(mode)
                env = dict(env_base)
                if lora is not None and mode == "theta":
                    (repo.root / LORA_DATA).write_bytes(checkpoints.save_checkpoint("flat-bin", lora))
                    env[updates.ENV_UPDATE_DATA] = LORA_DATA
                _write(repo, model)
                step.add_seconds[mode] = _timed(lambda: subprocess.run(
                    ["git", "add", MODEL], cwd=repo.root, env=env, check=True))
                repo.git("commit", "-q", "--allow-empty", "-m", name)
                step.commit[mode] = repo.out("rev-parse", "HEAD")
                step.new_bytes[mode] = repos.store_bytes(mode) - before
            steps.append(step)
            log(f"committed {name}")

        model = _base_model(cfg, rng)
        commit("base", "dense base checkpoint", model)

        lora_name = "layer00.weight"
        target = model[lora_name]
        a = rng.standard_normal((target.shape[0], cfg.rank)) * 1e-2
        b = rng.standard_normal((cfg.rank, target.shape[-1])) * 1e-2
        lora = updates.LowRank(Tensor.from_array(a), Tensor.from_array(b))
        model = dict(model)
        model[lora_name] = updates.apply_update(lora, Tensor.from_array(target)).array().copy()
        commit("lora", f"rank-{cfg.rank} side-loaded update of {lora_name}", model,
               lora=ModelSnapshot([(f"{lora_name}/A", lora.a), (f"{lora_name}/B", lora.b)]))

        model = dict(model)
        for k, v in model.items():
            flat = v.reshape(-1).copy()
            count = max(1, int(round(cfg.sparsity * flat.size)))
            idx = rng.choice(flat.size, size=count, replace=False)
            flat[idx] += rng.standard_normal(count).astype(flat.dtype)
            model[k] = flat.reshape(v.shape)
        commit("sparse", f"{cfg.sparsity:.2%} of elements changed", model)

        for repo in repos.repos.values():
            repo.git("checkout", "-q", "-b", "rte")
        rte = _fine_tune(model, rng, 1e-2)
        commit("rte", "dense fine-tune on branch rte", rte)

        for mode, repo in repos.repos.items():
            t = _timed(lambda: repo.git("checkout", "-q", "main"))
            log(f"{mode}: switched back to main in {t:.2f}s")
        anli = _fine_tune(model, rng, 1e-2)
        commit("anli", "dense fine-tune on main", anli)

        merged = {k: average_tensors(Tensor.from_array(anli[k]), Tensor.from_array(rte[k])).array()
                  for k in anli}
        step = StepResult("merge", "merge rte into main by parameter averaging")
        for mode, repo in repos.repos.items():
            before = repos.store_bytes(mode)
            if mode == "theta":
                step.add_seconds[mode] = _timed(lambda: repo.git("merge", "-q", "--no-edit", "rte"))
                got = checkpoints.load_checkpoint("flat-bin", (repo.root / MODEL).read_bytes())
                if got != _snapshot(merged):
                    raise RuntimeError("theta merge result differs from the averaged checkpoint")
            else:
                repo.git("merge", "-q", "--no-commit", "-s", "ours", "rte")
                _write(repo, merged)
                step.add_seconds[mode] = _timed(lambda: repo.git("add", MODEL))
                repo.git("commit", "-q", "--no-edit")
            step.commit[mode] = repo.out("rev-parse", "HEAD")
            step.new_bytes[mode] = repos.store_bytes(mode) - before
        steps.append(step)
        log("committed merge")

        model = {k: v for k, v in merged.items() if k != SENTINELS}
        commit("remove", f"drop the {SENTINELS!r} group", model)

        # Re-saving the same model (e.g. after a reload/convert round trip)
        # perturbs values at rounding-noise level; nothing actually changed.
        noisy = {k: (v * (1 + 1e-13 * rng.standard_normal(v.shape))).astype(v.dtype)
                 for k, v in model.items()}
        commit("resave", "re-save with rounding-level noise", noisy)

        for step in steps:
            for mode, repo in repos.repos.items():
                (repo.root / MODEL).unlink()
                sha = step.commit[mode]
                step.checkout_seconds[mode] = _timed(
                    lambda: repo.git("checkout", "-q", sha, "--", MODEL))
        for mode, repo in repos.repos.items():
            repo.git("checkout", "-q", "HEAD", "--", MODEL)

        totals = {mode: repos.store_bytes(mode) for mode in repos.repos}
        return BenchResult(cfg, steps, totals, time.perf_counter() - started)
    finally:
        if not cfg.keep:
            shutil.rmtree(root, ignore_errors=True)
        else:
            print(f"bench repositories kept in {root}", file=sys.stderr)

