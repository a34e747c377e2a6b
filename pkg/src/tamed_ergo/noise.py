"""Deterministic, parallel-safe Gaussian increment generation.

Every Gaussian draw is a pure function of (master seed, path index,
draw index): the triple is fed through a Philox4x32-10 counter-based
generator (key = 64-bit seed, counter = 64-bit draw block || 64-bit
path index) and the resulting 64 uniform bits are mapped to a standard
normal via the inverse CDF. Because there is no sequential generator
state shared between paths, path work can be partitioned arbitrarily
across workers and the increments per (path, step, channel) never
change.

Pinned transform (do not alter - it defines the bit-level contract):

    block b of path p yields words (w0, w1, w2, w3)
    draw 2b   uses v = w0 << 32 | w1
    draw 2b+1 uses v = w2 << 32 | w3
    u = ((v >> 12) + 0.5) * 2**-52        exact, u in [2**-53, 1 - 2**-53]
    z = inverse_normal_cdf(u)             Wichura's AS241 rational fits
    increment = sqrt(dt) * z

Within a path, the draw for (step n, channel k) is draw index n*K + k.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba as nb
import numpy as np

__all__ = [
    "MasterSeed",
    "NoiseStream",
    "make_stream",
    "gaussian_increments",
    "coarse_from_fine",
    "normal_draws",
    "normal_path_block",
]

_MASK32 = nb.uint64(0xFFFFFFFF)
_MULT_HI = nb.uint64(0xD2511F53)  # Philox4x32 multiplier for counter word 0
_MULT_LO = nb.uint64(0xCD9E8D57)  # Philox4x32 multiplier for counter word 2
_WEYL_0 = nb.uint64(0x9E3779B9)
_WEYL_1 = nb.uint64(0xBB67AE85)
_TWO_NEG_52 = 2.220446049250313e-16


@nb.njit(inline="always")
def _philox_block(blk, plo, phi, k0_init, k1_init):
    """One Philox4x32-10 block: counter = (blk, path), key = seed."""
    c0 = blk & _MASK32
    c1 = blk >> nb.uint64(32)
    c2 = plo
    c3 = phi
    k0 = k0_init
    k1 = k1_init
    for _ in range(10):
        prod0 = _MULT_HI * c0
        prod1 = _MULT_LO * c2
        n0 = (prod1 >> nb.uint64(32)) ^ c1 ^ k0
        n1 = prod1 & _MASK32
        n2 = (prod0 >> nb.uint64(32)) ^ c3 ^ k1
        n3 = prod0 & _MASK32
        c0, c1, c2, c3 = n0, n1, n2, n3
        k0 = (k0 + _WEYL_0) & _MASK32
        k1 = (k1 + _WEYL_1) & _MASK32
    return c0, c1, c2, c3


@nb.njit(inline="always")
def _unit_from_u64(v):
    # ((v >> 12) + 1/2) * 2^-52 is exact and lands in [2^-53, 1 - 2^-53],
    # symmetric about 1/2, never 0 or 1.
    return (nb.float64(v >> nb.uint64(12)) + 0.5) * _TWO_NEG_52


@nb.njit(inline="always")
def _inv_norm_cdf(p):
    # Wichura's algorithm AS241 (PPND16), accurate to ~1e-16.
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        num = (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r
                    + 6.7265770927008700853e4) * r + 4.5921953931549871457e4) * r
                  + 1.3731693765509461125e4) * r + 1.9715909503065514427e3) * r
                + 1.3314166789178437745e2) * r + 3.3871328727963666080e0)
        den = (((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r
                    + 3.9307895800092710610e4) * r + 2.1213794301586595867e4) * r
                  + 5.3941960214247511077e3) * r + 6.8718700749205790830e2) * r
                + 4.2313330701600911252e1) * r + 1.0)
        return q * num / den
    r = p if q < 0.0 else 1.0 - p
    r = np.sqrt(-np.log(r))
    if r <= 5.0:
        r = r - 1.6
        num = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r
                    + 2.41780725177450611770e-1) * r + 1.27045825245236838258e0) * r
                  + 3.64784832476320460504e0) * r + 5.76949722146069140550e0) * r
                + 4.63033784615654529590e0) * r + 1.42343711074968357734e0)
        den = (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r
                    + 1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r
                  + 6.89767334985100004550e-1) * r + 1.67638483018380384940e0) * r
                + 2.05319162663775882187e0) * r + 1.0)
    else:
        r = r - 5.0
        num = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
                    + 1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r
                  + 2.96560571828504891230e-1) * r + 1.78482653991729133580e0) * r
                + 5.46378491116411436990e0) * r + 6.65790464350110377720e0)
        den = (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r
                    + 1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r
                  + 1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r
                + 5.99832206555887937690e-1) * r + 1.0)
    x = num / den
    return -x if q < 0.0 else x


@nb.njit(cache=True)
def _normal_draws(seed, path, start, n):
    out = np.empty(n, dtype=np.float64)
    k0 = seed & _MASK32
    k1 = seed >> nb.uint64(32)
    plo = path & _MASK32
    phi = path >> nb.uint64(32)
    for i in range(n):
        idx = start + nb.uint64(i)
        w0, w1, w2, w3 = _philox_block(idx >> nb.uint64(1), plo, phi, k0, k1)
        if idx & nb.uint64(1) == nb.uint64(0):
            v = (w0 << nb.uint64(32)) | w1
        else:
            v = (w2 << nb.uint64(32)) | w3
        out[i] = _inv_norm_cdf(_unit_from_u64(v))
    return out


@nb.njit(cache=True)
def _normal_path_block(seed, path0, n_paths, n_draws):
    out = np.empty((n_paths, n_draws), dtype=np.float64)
    k0 = seed & _MASK32
    k1 = seed >> nb.uint64(32)
    n_blocks = (n_draws + 1) // 2
    for p in range(n_paths):
        path = path0 + nb.uint64(p)
        plo = path & _MASK32
        phi = path >> nb.uint64(32)
        for b in range(n_blocks):
            w0, w1, w2, w3 = _philox_block(nb.uint64(b), plo, phi, k0, k1)
            j = 2 * b
            v0 = (w0 << nb.uint64(32)) | w1
            out[p, j] = _inv_norm_cdf(_unit_from_u64(v0))
            if j + 1 < n_draws:
                v1 = (w2 << nb.uint64(32)) | w3
                out[p, j + 1] = _inv_norm_cdf(_unit_from_u64(v1))
    return out


def normal_draws(seed: int, path: int, start: int, n: int) -> np.ndarray:
    """Standard normals for draw indices [start, start + n) of one path."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    return _normal_draws(np.uint64(seed), np.uint64(path), np.uint64(start), np.int64(n))


def normal_path_block(seed: int, path0: int, n_paths: int, n_draws: int) -> np.ndarray:
    """Standard normals for paths [path0, path0 + n_paths), draws [0, n_draws).

    Row p is bit-identical to normal_draws(seed, path0 + p, 0, n_draws);
    this is the bulk entry point used by the Monte Carlo engine.
    """
    return _normal_path_block(
        np.uint64(seed), np.uint64(path0), np.int64(n_paths), np.int64(n_draws)
    )


@dataclass(frozen=True)
class MasterSeed:
    """Root of the reproducibility contract: one 64-bit unsigned seed."""

    seed: int

    def __post_init__(self):
        if not (0 <= int(self.seed) < 2**64):
            raise ValueError("seed must fit in 64 unsigned bits")


@dataclass
class NoiseStream:
    """Per-path Gaussian increment source, owned by a single consumer.

    cursor tracks the (step_index, channel) position of the next draw;
    draw index within the path is step * K + channel for K channels.
    """

    seed: int
    path_index: int
    _draws_consumed: int = 0
    _step_index: int = field(default=0, repr=False)

    @property
    def cursor(self) -> tuple[int, int]:
        return (self._step_index, 0)

    def draw_normals(self, n: int) -> np.ndarray:
        z = normal_draws(self.seed, self.path_index, self._draws_consumed, n)
        self._draws_consumed += n
        return z


def make_stream(master: MasterSeed, path_index: int) -> NoiseStream:
    """Stream keyed by (master, path_index); construction is pure."""
    if path_index < 0:
        raise ValueError("path_index must be nonnegative")
    return NoiseStream(seed=master.seed, path_index=path_index)


def gaussian_increments(stream: NoiseStream, dt: float, K: int) -> np.ndarray:
    """K independent N(0, dt) draws for the next time step of this path."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    if K < 1:
        raise ValueError("K must be a positive integer")
    z = stream.draw_normals(K)
    stream._step_index += 1
    return np.sqrt(dt) * z


def coarse_from_fine(fine_pair: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    """Combine two half-step increment vectors into one full-step increment.

    Brownian increments are additive, so the sum of two N(0, dt/2) draws
    is the matching N(0, dt) draw for the coarser grid.
    """
    first, second = fine_pair
    first = np.asarray(first, dtype=np.float64)
    second = np.asarray(second, dtype=np.float64)
    if first.shape != second.shape:
        raise ValueError("fine increment pair must have matching shapes")
    return first + second
