"""Build a three-step update chain by hand and replay it.

Dense [1,2,3,4], then a sparse +1 on element 0, then a per-element scale of 2.
Only the first step stores the full tensor.
"""

from __future__ import annotations

import tempfile

import numpy as np

from gittheta import lsh, updates
from gittheta.model import GroupMetadata, ModelMetadata, Tensor
from gittheta.store import ObjectStore

store = ObjectStore(tempfile.mkdtemp(prefix="theta-demo-"))
versions: list[ModelMetadata] = []


def commit(payload, value):
    prev = versions[-1].groups["w"] if versions else None
    flags = {}
    if not isinstance(payload, updates.Dense):
        flags = {"prior": prev.digest(), **updates.payload_flags(payload, value.array().ndim)}
    pointer = store.put_tensors(updates.write(payload))
    rec = GroupMetadata(value.shape, value.dtype, lsh.signature(value),
                        updates.kind_of(payload), pointer, flags)
    versions.append(ModelMetadata("flat-bin", {"w": rec}))
    print(f"{rec.update_kind.value:>12}: stored {pointer.size} bytes")
    return rec


def f32(*values):
    return Tensor.from_array(np.array(values, dtype=np.float32))


v0 = f32(1, 2, 3, 4)
commit(updates.Dense(v0), v0)

_, sparse = updates.extract(v0, f32(2, 2, 3, 4), updates.UpdateKind.SPARSE)
print("sparse delta:", sparse.indices.array().tolist(), sparse.values.array().tolist())
v1 = updates.apply_update(sparse, v0)
commit(sparse, v1)

scale = updates.ScaleVector(f32(2, 2, 2, 2))
v2 = updates.apply_update(scale, v1)
last = commit(scale, v2)

history = updates.MemoryHistory(versions, store.get)
print("reconstructed:", updates.reconstruct(last, "w", history).array().tolist())
