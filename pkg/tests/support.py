"""Shared helpers for the test suite: random models and scratch Git repos."""

from __future__ import annotations

import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from gittheta import checkpoints
from gittheta.commands import cmd_install, cmd_track
from gittheta.gitio import Repo
from gittheta.model import Dtype, ModelSnapshot, Tensor

THETA = [sys.executable, "-m", "gittheta"]


def random_tensor(rng: np.random.Generator, dtype: Dtype, shape: tuple[int, ...]) -> Tensor:
    if dtype == Dtype.BOOL:
        arr = rng.random(shape) < 0.5
    elif dtype.is_float:
        arr = rng.standard_normal(shape).astype(dtype.numpy)
    else:
        info = np.iinfo(dtype.numpy)
        arr = rng.integers(info.min, info.max, size=shape, endpoint=True, dtype=dtype.numpy)
    return Tensor.from_array(arr, dtype)


def random_shape(rng: np.random.Generator, max_elems: int = 64) -> tuple[int, ...]:
    rank = int(rng.integers(0, 4))
    shape = []
    for _ in range(rank):
        shape.append(int(rng.integers(0, 5)) if rng.random() < 0.1 else int(rng.integers(1, 8)))
    while shape and int(np.prod(shape)) > max_elems:
        shape.pop()
    return tuple(shape)


def random_snapshot(rng: np.random.Generator, groups: int, dtypes=tuple(Dtype)) -> ModelSnapshot:
    out = {}
    for g in range(groups):
        dtype = dtypes[int(rng.integers(len(dtypes)))]
        name = f"block{g // 10}/layer{g}/w"
        out[name] = random_tensor(rng, dtype, random_shape(rng))
    return ModelSnapshot(out)


def snapshot_of(arrays: dict[str, np.ndarray]) -> ModelSnapshot:
    return ModelSnapshot((k, Tensor.from_array(np.asarray(v))) for k, v in arrays.items())


def arrays_of(snapshot: ModelSnapshot) -> dict[str, np.ndarray]:
    return {k: t.array().copy() for k, t in snapshot.items()}


class GitRepo:
    """A scratch repository with theta installed, driven like a user would."""

    def __init__(self, path: Path, *, init: bool = True) -> None:
        self.path = Path(path)
        if init:
            self.path.mkdir(parents=True, exist_ok=True)
            self.run("init", "-q", "-b", "main")
            configure_identity(self.path)
            cmd_install(self.repo)

    @property
    def repo(self) -> Repo:
        return Repo.discover(self.path)

    def run(self, *args: str, env: dict | None = None, input: bytes | None = None,
            check: bool = True) -> subprocess.CompletedProcess:
        full_env = dict(os.environ)
        full_env.update(env or {})
        proc = subprocess.run(["git", *args], cwd=self.path, env=full_env, input=input,
                              capture_output=True)
        if check and proc.returncode != 0:
            raise AssertionError(
                f"git {' '.join(args)} failed ({proc.returncode}):\n"
                f"{proc.stdout.decode(errors='replace')}\n{proc.stderr.decode(errors='replace')}"
            )
        return proc

    def out(self, *args: str) -> str:
        return self.run(*args).stdout.decode().strip()

    def track(self, path: str = "model.bin", checkpoint_type: str = "flat-bin") -> None:
        cmd_track(self.repo, path, checkpoint_type)
        self.run("add", ".gitattributes")

    def write_model(self, snapshot: ModelSnapshot, path: str = "model.bin",
                    checkpoint_type: str = "flat-bin") -> bytes:
        data = checkpoints.save_checkpoint(checkpoint_type, snapshot)
        (self.path / path).write_bytes(data)
        return data

    def read_model(self, path: str = "model.bin", checkpoint_type: str = "flat-bin") -> ModelSnapshot:
        return checkpoints.load_checkpoint(checkpoint_type, (self.path / path).read_bytes())

    def commit(self, message: str, *paths: str, env: dict | None = None) -> str:
        self.run("add", *(paths or ("model.bin",)), env=env)
        self.run("commit", "-q", "--allow-empty", "-m", message, env=env)
        return self.out("rev-parse", "HEAD")

    def metadata(self, rev: str = "HEAD", path: str = "model.bin"):
        from gittheta.model import decode_metadata

        return decode_metadata(self.run("cat-file", "blob", f"{rev}:{path}").stdout)

    def store_bytes(self) -> int:
        return self.repo.store.size_on_disk()


def configure_identity(path: Path) -> None:
    for key, value in (("user.name", "Theta Tester"), ("user.email", "tester@example.com"),
                       ("commit.gpgsign", "false"), ("gc.auto", "0")):
        subprocess.run(["git", "config", key, value], cwd=path, check=True)
