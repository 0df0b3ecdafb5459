"""How often do two nearby parameter vectors land in the same 16 buckets?

Run with ``python3 demos/lsh_calibration.py``. Takes a few seconds.
"""

from __future__ import annotations

import numpy as np

from gittheta import lsh
from gittheta.model import Tensor

print(f"bucket width r = {lsh.WIDTH:g}, pool of {lsh.POOL_SIZE} shared normals")

# Collision frequency as the perturbation grows. Pairs are N(0,1)^1000 points
# and a displacement of exactly the given Euclidean norm.
for distance in (1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-3):
    rate = lsh.collision_rate(distance, 5000, rng=np.random.default_rng(0))
    print(f"  |delta| = {distance:<6g}  all-16 collision rate {rate:.4f}")

# Independent random vectors never share a signature.
print("independent pairs:", lsh.independent_collision_rate(2000))

# The same idea at the group level: a float round-off level edit is "unchanged".
x = np.random.default_rng(1).standard_normal(4096)
tiny = x + 1e-13 * x
big = x.copy()
big[0] += 1e-3
for label, y in (("round-off", tiny), ("real edit", big)):
    same = lsh.signature(Tensor.from_array(x)) == lsh.signature(Tensor.from_array(y))
    print(f"{label:>10}: signatures equal = {same}")
