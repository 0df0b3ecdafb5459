"""Pooled Euclidean LSH for noise-tolerant change detection.

Each of the 16 hash functions projects the flattened tensor (promoted to
f64) onto a pseudo-random Gaussian line and buckets the result::

    bucket_j = floor((sum_i pool[mix(i, j) % POOL_SIZE] * x_i + b_j) / WIDTH)

The line's coordinates are drawn from a fixed pool through an index hash, so
tensors of any size can be hashed without storing a projection matrix.

Protocol constants (changing any of them needs a metadata version bump):

* ``SEED`` feeds a splitmix64 stream; the first ``POOL_SIZE`` outputs become
  the Gaussian pool (Box-Muller, quantized to multiples of 2**-20 so libm
  differences between machines cannot leak into the pool), the next 16 give
  the offsets ``b_j`` uniform on ``[0, WIDTH)``.
* ``mix(i, j) = fmix64(i * MIX_I ^ (j + 1) * MIX_J)`` with MurmurHash3's
  64-bit finalizer.
* ``WIDTH`` was calibrated by Monte-Carlo (see :func:`calibrate_bucket_width`
  and ``demos/lsh_calibration.py``) so that pairs 1e-8 apart collide on all 16
  buckets with probability >= 0.99 plus a guard band for 10^4-trial checks.
"""

from __future__ import annotations

import enum
import functools
import math
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from .model import NUM_HASHES, GroupMetadata, LshSignature, Tensor

SEED = 0x67697474686574A1
POOL_SIZE = 1 << 16
WIDTH = 1.8e-5
MIX_I = 0x9E3779B97F4A7C15
MIX_J = 0xC2B2AE3D27D4EB4F
_FMIX_1 = 0xFF51AFD7ED558CCD
_FMIX_2 = 0xC4CEB9FE1A85EC53
_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
_POOL_QUANTUM = 2.0**-20

_CHUNK = 1 << 16
_CACHE_LIMIT = 1 << 16  # elements per cached projection matrix

_INT64_MIN = -(2**63)
_INT64_MAX = 2**63 - 1

_U = np.uint64


@dataclass(frozen=True)
class LshConfig:
    num_hashes: int = NUM_HASHES
    bucket_width: float = WIDTH
    pool_size: int = POOL_SIZE
    seed: int = SEED

    def __post_init__(self) -> None:
        if self.num_hashes != NUM_HASHES:
            raise ValueError(f"num_hashes is fixed at {NUM_HASHES}")
        if self.pool_size < 1024 or self.pool_size & (self.pool_size - 1):
            raise ValueError("pool_size must be a power of two >= 1024")
        if not self.bucket_width > 0:
            raise ValueError("bucket_width must be positive")


DEFAULT_CONFIG = LshConfig()


@dataclass(frozen=True)
class CloseBand:
    d1: float = 1e-8
    d2: float = 1e-6
    p1: float = 0.99
    atol: float = 1e-8
    rtol: float = 1e-5


DEFAULT_BAND = CloseBand()


def _splitmix64(seed: int, count: int, start: int = 0) -> np.ndarray:
    k = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = _U(seed) + k * _U(_SPLITMIX_GAMMA)
        z = (z ^ (z >> _U(30))) * _U(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> _U(27))) * _U(0x94D049BB133111EB)
    return z ^ (z >> _U(31))


def _unit_interval(bits: np.ndarray) -> np.ndarray:
    """Map uint64 to (0, 1] using the top 53 bits."""
    return ((bits >> _U(11)).astype(np.float64) + 1.0) * 2.0**-53


@functools.lru_cache(maxsize=4)
def _pool_and_offsets(cfg: LshConfig) -> tuple[np.ndarray, np.ndarray]:
    half = cfg.pool_size // 2
    stream = _splitmix64(cfg.seed, cfg.pool_size + cfg.num_hashes)
    u1 = _unit_interval(stream[:half])
    u2 = _unit_interval(stream[half : cfg.pool_size])
    radius = np.sqrt(-2.0 * np.log(u1))
    pool = np.concatenate([radius * np.cos(2 * math.pi * u2), radius * np.sin(2 * math.pi * u2)])
    pool = np.round(pool / _POOL_QUANTUM) * _POOL_QUANTUM
    offsets = (1.0 - _unit_interval(stream[cfg.pool_size :])) * cfg.bucket_width
    pool.setflags(write=False)
    offsets.setflags(write=False)
    return pool, offsets


def mix(i: np.ndarray, j: int) -> np.ndarray:
    """64-bit avalanche mix of element index ``i`` and hash index ``j``."""
    with np.errstate(over="ignore"):
        h = np.asarray(i, dtype=np.uint64) * _U(MIX_I)
        h ^= _U(((j + 1) * MIX_J) & 0xFFFFFFFFFFFFFFFF)
        h ^= h >> _U(33)
        h *= _U(_FMIX_1)
        h ^= h >> _U(33)
        h *= _U(_FMIX_2)
        h ^= h >> _U(33)
    return h


def _line_chunk(cfg: LshConfig, start: int, stop: int) -> np.ndarray:
    """Coordinates ``[start, stop)`` of all hash lines, shape (num_hashes, stop-start)."""
    pool, _ = _pool_and_offsets(cfg)
    idx = np.arange(start, stop, dtype=np.uint64)
    mask = _U(cfg.pool_size - 1)
    return np.stack([pool[(mix(idx, j) & mask).astype(np.intp)] for j in range(cfg.num_hashes)])


@functools.lru_cache(maxsize=16)
def projection_matrix(n: int, cfg: LshConfig = DEFAULT_CONFIG) -> np.ndarray:
    """The (num_hashes, n) matrix of hash lines for n-element inputs."""
    lines = _line_chunk(cfg, 0, n)
    lines.setflags(write=False)
    return lines


def projections(x: np.ndarray, cfg: LshConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Raw projections of a flat f64 vector onto the hash lines."""
    n = x.shape[0]
    if n <= _CACHE_LIMIT:
        return projection_matrix(n, cfg) @ x
    total = np.zeros(cfg.num_hashes)
    for start in range(0, n, _CHUNK):
        stop = min(start + _CHUNK, n)
        total += _line_chunk(cfg, start, stop) @ x[start:stop]
    return total


def buckets(proj: np.ndarray, cfg: LshConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Bucket indices for projections of shape (..., num_hashes) as int64."""
    _, offsets = _pool_and_offsets(cfg)
    with np.errstate(invalid="ignore", over="ignore"):
        q = np.floor((proj + offsets) / cfg.bucket_width)
    out = np.empty(q.shape, dtype=np.int64)
    finite = np.isfinite(q) & (q > _INT64_MIN) & (q < _INT64_MAX)
    out[finite] = q[finite].astype(np.int64)
    out[np.isnan(q)] = _INT64_MIN
    out[~finite & (q >= _INT64_MAX)] = _INT64_MAX
    out[~finite & (q <= _INT64_MIN)] = _INT64_MIN + 1
    return out


def signature_of_array(values: np.ndarray, cfg: LshConfig = DEFAULT_CONFIG) -> LshSignature:
    x = np.asarray(values).reshape(-1).astype(np.float64)
    return LshSignature(tuple(buckets(projections(x, cfg), cfg).tolist()))


def signature(t: Tensor, cfg: LshConfig = DEFAULT_CONFIG) -> LshSignature:
    return signature_of_array(t.array(), cfg)


class Verdict(enum.Enum):
    UNCHANGED = "unchanged"
    CHANGED = "changed"


def allclose(new: Tensor, old: Tensor, band: CloseBand = DEFAULT_BAND) -> bool:
    """Elementwise closeness; exact equality for integer and bool tensors."""
    if new.shape != old.shape or new.dtype != old.dtype:
        return False
    if not new.dtype.is_float:
        return new.data == old.data
    a = new.array().astype(np.float64)
    b = old.array().astype(np.float64)
    return bool(np.allclose(a, b, rtol=band.rtol, atol=band.atol, equal_nan=True))


def compare(
    prev: GroupMetadata,
    new_tensor: Tensor,
    prev_loader: Callable[[], Tensor],
    band: CloseBand = DEFAULT_BAND,
    *,
    new_signature: LshSignature | None = None,
    cfg: LshConfig = DEFAULT_CONFIG,
) -> Verdict:
    """Decide whether ``new_tensor`` differs from the version ``prev`` records.

    Metadata mismatches short-circuit; a signature match is always confirmed
    against the loaded previous value before reporting UNCHANGED.
    """
    if prev.shape != new_tensor.shape or prev.dtype != new_tensor.dtype:
        return Verdict.CHANGED
    sig = new_signature if new_signature is not None else signature(new_tensor, cfg)
    if sig != prev.lsh:
        return Verdict.CHANGED
    return Verdict.UNCHANGED if allclose(new_tensor, prev_loader(), band) else Verdict.CHANGED


def collision_rate(
    distance: float,
    trials: int,
    *,
    dim: int = 1000,
    rng: np.random.Generator | None = None,
    cfg: LshConfig = DEFAULT_CONFIG,
    batch: int = 5000,
) -> float:
    """Monte-Carlo frequency of all-16-bucket collisions for pairs ``distance`` apart.

    Base points are N(0, 1)^dim; the displacement has a uniformly random
    direction and Euclidean norm exactly ``distance``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    lines = projection_matrix(dim, cfg)
    hits = 0
    done = 0
    while done < trials:
        m = min(batch, trials - done)
        x = rng.standard_normal((m, dim))
        d = rng.standard_normal((m, dim))
        d *= distance / np.linalg.norm(d, axis=1, keepdims=True)
        a = buckets(x @ lines.T, cfg)
        b = buckets((x + d) @ lines.T, cfg)
        hits += int(np.count_nonzero(np.all(a == b, axis=1)))
        done += m
    return hits / trials


def independent_collision_rate(
    trials: int,
    *,
    dim: int = 1000,
    rng: np.random.Generator | None = None,
    cfg: LshConfig = DEFAULT_CONFIG,
) -> float:
    """Collision frequency for independently drawn N(0, 1)^dim pairs."""
    rng = rng if rng is not None else np.random.default_rng(1)
    lines = projection_matrix(dim, cfg)
    x = rng.standard_normal((trials, dim))
    y = rng.standard_normal((trials, dim))
    return float(np.mean(np.all(buckets(x @ lines.T, cfg) == buckets(y @ lines.T, cfg), axis=1)))


def calibrate_bucket_width(
    candidates,
    *,
    distance: float = 1e-8,
    target: float = 0.99,
    trials: int = 100_000,
    check_trials: int = 10_000,
    z: float = 2.576,
    seed: int = 2024,
) -> tuple[float, dict[float, float]]:
    """Smallest candidate width meeting ``target`` with a sampling guard band.

    A width is accepted when the lower z-bound of its estimated collision
    probability clears ``target`` plus the z-width of a ``check_trials``-sized
    experiment, so later checks of that size pass with margin.
    """
    guard = z * math.sqrt(target * (1 - target) / check_trials)
    rates: dict[float, float] = {}
    for width in sorted(candidates):
        cfg = LshConfig(bucket_width=width)
        p = collision_rate(distance, trials, rng=np.random.default_rng(seed), cfg=cfg)
        rates[width] = p
        se = math.sqrt(max(p * (1 - p), 1e-12) / trials)
        if p - z * se >= target + guard:
            return width, rates
    raise ValueError("no candidate width reaches the target collision probability")
