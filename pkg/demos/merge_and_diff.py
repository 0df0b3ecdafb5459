"""Three-way merging and diffing of model metadata, without Git.

Two branches edit the same base model: one touches group "a", the other
touches "a" and "b". Group "b" merges automatically; "a" is a conflict that
we resolve by averaging.
"""

from __future__ import annotations

import tempfile

import numpy as np

from gittheta import merge, updates
from gittheta.diff import diff, format_report
from gittheta.model import ModelMetadata, Tensor
from gittheta.store import ObjectStore

store = ObjectStore(tempfile.mkdtemp(prefix="theta-merge-"))


def model(**arrays):
    return ModelMetadata("flat-bin", {
        n: merge.store_dense(Tensor.from_array(np.asarray(a, np.float32)), store)
        for n, a in arrays.items()})


base = model(a=[0, 0], b=[1, 1], c=[5])
ours = model(a=[1, 3], b=[1, 1], c=[5])
theirs = model(a=[3, 5], b=[9, 9], c=[5])

print("ours vs base:\n" + format_report(diff(base, ours)), end="")
print("theirs vs base:\n" + format_report(diff(base, theirs)), end="")

resolved, conflicts = merge.detect_conflicts(base, ours, theirs)
print("auto-resolved:", sorted(resolved), " conflicts:", [c.name for c in conflicts])


def load(name, rec):
    return updates.reconstruct(rec, name, updates.MemoryHistory([], store.get))


merged, _ = merge.merge_models(base, ours, theirs,
                               lambda cs: {c.name: "average" for c in cs}, load, store)
for name, rec in merged.groups.items():
    print(f"  {name} = {load(name, rec).array().tolist()}")
