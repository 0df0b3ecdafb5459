"""A complete Git session with a tracked checkpoint, driven through the CLI.

Creates a scratch repository, tracks ``model.bin``, commits a dense base and
a sparse fine-tune, shows ``git diff`` and prints the store growth.
"""

from __future__ import annotations

import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np

from gittheta import checkpoints
from gittheta.model import ModelSnapshot, Tensor

work = Path(tempfile.mkdtemp(prefix="theta-git-"))
theta = [sys.executable, "-m", "gittheta"]


def sh(*cmd, **kw):
    out = subprocess.run(cmd, cwd=work, check=True, capture_output=True, text=True, **kw)
    return out.stdout.strip()


def store_size():
    objects = work / ".git" / "theta" / "objects"
    return sum(p.stat().st_size for p in objects.glob("*/*/*")) if objects.exists() else 0


def save(arrays):
    snap = ModelSnapshot((k, Tensor.from_array(v)) for k, v in arrays.items())
    (work / "model.bin").write_bytes(checkpoints.save_checkpoint("flat-bin", snap))


sh("git", "init", "-q", "-b", "main")
sh("git", "config", "user.name", "Demo")
sh("git", "config", "user.email", "demo@example.com")
print(sh(*theta, "install"))
print(sh(*theta, "track", "model.bin"))

rng = np.random.default_rng(0)
model = {f"layer{i}/w": rng.standard_normal((256, 256)).astype(np.float32) for i in range(4)}
save(model)
sh("git", "add", ".gitattributes", "model.bin")
sh("git", "commit", "-q", "-m", "base model")
print(f"after base commit: store holds {store_size():,} bytes")
print("what Git stores for model.bin (first 120 chars):")
print(" ", sh("git", "cat-file", "blob", "HEAD:model.bin")[:120], "...")

model["layer2/w"] = model["layer2/w"].copy()
model["layer2/w"][0, :20] += 0.1
before = store_size()
save(model)
# git diff runs the clean filter on the working tree, which already stores the delta.
print("git diff:", sh("git", "diff"))
sh("git", "commit", "-q", "-am", "fine-tune layer2")
print(f"sparse fine-tune added {store_size() - before:,} bytes")
print("update kind of layer2/w:", sh("git", "cat-file", "blob", "HEAD:model.bin").split(
    '"layer2/w"')[1].split('"update_kind":"')[1].split('"')[0])
print(f"scratch repository left at {work}")
