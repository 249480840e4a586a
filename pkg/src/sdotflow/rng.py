"""Counter-based Gaussian noise so a training pair can be stored as a seed.

Everything here is vectorised over arrays of ``uint64`` seeds. The
algorithm is fixed: a SplitMix64 stream seeded with the pair seed, 52-bit
uniforms in the open interval (0, 1), then Box-Muller. Changing any step
breaks replay of existing pair files.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError

GOLDEN_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_MUL2 = np.uint64(0x94D049BB133111EB)
_TWO_NEG_52 = 2.0 ** -52
MASK64 = (1 << 64) - 1


def _as_u64(values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.dtype == np.uint64:
        return arr
    if arr.dtype.kind == "i":
        return arr.astype(np.int64).view(np.uint64)
    flat = [int(v) & MASK64 for v in arr.ravel()]
    return np.array(flat, dtype=np.uint64).reshape(arr.shape)


def _mix64(z: np.ndarray) -> np.ndarray:
    # uint64 array arithmetic wraps modulo 2**64
    z = (z ^ (z >> np.uint64(30))) * _MUL1
    z = (z ^ (z >> np.uint64(27))) * _MUL2
    return z ^ (z >> np.uint64(31))


def splitmix64_stream(seeds, count: int) -> np.ndarray:
    """Return ``count`` SplitMix64 outputs for every seed.

    Parameters
    ----------
    seeds : array_like of uint64, shape (n,)
    count : int

    Returns
    -------
    ndarray of uint64, shape (n, count)
    """
    state = _as_u64(np.atleast_1d(seeds)).reshape(-1, 1)
    steps = np.arange(1, count + 1, dtype=np.uint64).reshape(1, -1)
    with np.errstate(over="ignore"):
        return _mix64(state + steps * GOLDEN_GAMMA)


def mix_seed(master_seed: int, index) -> np.ndarray | int:
    """Derive the seed of pair ``index`` from ``master_seed``.

    First SplitMix64 output of the state ``master_seed ^ (index * gamma)``.
    Accepts a scalar or an array of indices; stateless, so any pair can be
    regenerated on its own.
    """
    scalar = np.ndim(index) == 0
    idx = _as_u64(np.atleast_1d(index))
    master = np.uint64(int(master_seed) & MASK64)
    with np.errstate(over="ignore"):
        state = master ^ (idx * GOLDEN_GAMMA)
        out = _mix64(state + GOLDEN_GAMMA)
    return int(out[0]) if scalar else out


def uniforms_from_words(words: np.ndarray) -> np.ndarray:
    """Map 64-bit words to floats in the open interval (0, 1).

    The top 52 bits plus one half, scaled by 2**-52; every result is exact,
    so neither 0 nor 1 can occur (53 bits would round the top word to 1).
    """
    return ((words >> np.uint64(12)).astype(np.float64) + 0.5) * _TWO_NEG_52


def noise_from_seeds(seeds, dim: int) -> np.ndarray:
    """Standard-normal vectors, one row per seed.

    Word pair ``(w[2k], w[2k+1])`` of a seed's stream yields coordinates
    ``2k`` and ``2k+1`` through Box-Muller (cosine branch first). For odd
    ``dim`` the last sine value is dropped.
    """
    if dim < 1:
        raise ValidationError(f"dim must be >= 1, got {dim}")
    n_pairs = (dim + 1) // 2
    words = splitmix64_stream(seeds, 2 * n_pairs)
    u = uniforms_from_words(words)
    u1, u2 = u[:, 0::2], u[:, 1::2]
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    out = np.empty((u.shape[0], 2 * n_pairs))
    out[:, 0::2] = radius * np.cos(angle)
    out[:, 1::2] = radius * np.sin(angle)
    return out[:, :dim]


def noise_from_seed(seed: int, dim: int) -> np.ndarray:
    """Single-seed form of :func:`noise_from_seeds`."""
    return noise_from_seeds(np.array([int(seed) & MASK64], dtype=np.uint64), dim)[0]


def generator(seed: int) -> np.random.Generator:
    """numpy Generator used for bulk sampling that is never replayed per pair."""
    return np.random.Generator(np.random.PCG64(int(seed) & MASK64))
