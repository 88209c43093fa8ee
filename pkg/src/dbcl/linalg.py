"""Dense linear algebra, im2col-style tensor reshaping, and the deterministic RNG.

Everything here is a pure function of its inputs.  All floating point is
64-bit; all random streams come from splitmix64 so that independent
processes seeded identically produce bit-identical results.
"""

from __future__ import annotations

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN = 0x9E3779B97F4A7C15  # splitmix64 increment (2^64 / golden ratio)
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_INV_2_53 = 1.0 / (1 << 53)


class DimensionError(ValueError):
    """Operand shapes are inconsistent with the requested operation."""


def as_matrix(a) -> np.ndarray:
    """Coerce to a C-contiguous float64 2-D array."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D array, got ndim={m.ndim}")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product with explicit shape checking."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} x {b.shape}")
    return a @ b


# ------------------------------------------------------------------
# im2col / col2im for valid (no padding) stride-1 convolution
# ------------------------------------------------------------------

def unfold(x, k: int) -> np.ndarray:
    """Extract all k-by-k patches of a (b, c, h, w) tensor.

    Returns a (b*h1*w1, c*k*k) matrix with h1 = h-k+1, w1 = w-k+1.
    Patch rows are ordered batch-major then spatial row-major; within a
    patch, channel-major then spatial row-major.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise DimensionError(f"expected a 4-D tensor, got ndim={x.ndim}")
    b, c, h, w = x.shape
    if k < 1 or k > h or k > w:
        raise DimensionError(f"kernel {k} does not fit spatial dims ({h}, {w})")
    h1, w1 = h - k + 1, w - k + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    # (b, c, h1, w1, k, k) -> (b, h1, w1, c, k, k)
    patches = win.transpose(0, 2, 3, 1, 4, 5)
    return np.ascontiguousarray(patches.reshape(b * h1 * w1, c * k * k))


def fold(p, out_shape, k: int) -> np.ndarray:
    """Adjoint of :func:`unfold`: scatter-add patch rows back into a tensor.

    Overlapping positions sum, so fold(unfold(x)) multiplies each entry by
    the number of patches covering it.
    """
    p = as_matrix(p)
    b, c, h, w = out_shape
    h1, w1 = h - k + 1, w - k + 1
    if h1 < 1 or w1 < 1:
        raise DimensionError(f"kernel {k} does not fit spatial dims ({h}, {w})")
    if p.shape != (b * h1 * w1, c * k * k):
        raise DimensionError(
            f"patch matrix {p.shape} does not match output shape {tuple(out_shape)} with k={k}")
    patches = p.reshape(b, h1, w1, c, k, k)
    out = np.zeros((b, c, h, w), dtype=np.float64)
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki:ki + h1, kj:kj + w1] += patches[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
    return out


# ------------------------------------------------------------------
# splitmix64
# ------------------------------------------------------------------

def rng_next(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (new_state, 64-bit output)."""
    state = (state + GOLDEN) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return state, z ^ (z >> 31)


def rng_draw(state: int, n: int) -> tuple[int, np.ndarray]:
    """Draw n outputs at once (bit-identical to n scalar rng_next calls).

    splitmix64's k-th output from a given state is the mix function applied
    to state + k*GOLDEN, which vectorizes exactly over uint64.
    """
    steps = np.arange(1, n + 1, dtype=np.uint64)
    z = (np.uint64(state & MASK64) + steps * np.uint64(GOLDEN))
    new_state = int(z[-1]) if n > 0 else state
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    z = z ^ (z >> np.uint64(31))
    return new_state, z


def rng_uniform(state: int, n: int, lo: float = 0.0, hi: float = 1.0) -> tuple[int, np.ndarray]:
    """n doubles uniform on [lo, hi), using the top 53 bits of each draw."""
    state, z = rng_draw(state, n)
    u = (z >> np.uint64(11)).astype(np.float64) * _INV_2_53
    return state, lo + (hi - lo) * u


def derive_seed(root: int, round_index: int, layer_index: int) -> int:
    """Deterministically mix (root, round, layer) into an independent seed.

    Server and clients evaluating this with identical inputs obtain the
    same per-layer seed, which is what lets a broadcast carry one seed and
    still give every layer its own sketch.
    """
    _, s1 = rng_next((root ^ (round_index + 1)) & MASK64)
    _, s2 = rng_next((s1 ^ ((layer_index + 1) * GOLDEN)) & MASK64)
    return s2


def rng_indices(state: int, n: int, k: int) -> tuple[int, np.ndarray]:
    """Choose k distinct indices from range(n), uniform, order randomized.

    Partial Fisher-Yates; consumes exactly k draws.  Modulo reduction of
    64-bit draws carries a bias below 2**-50 for any realistic n.
    """
    if k > n:
        raise DimensionError(f"cannot choose {k} of {n}")
    pool = np.arange(n, dtype=np.int64)
    state, z = rng_draw(state, k)
    for i in range(k):
        j = i + int(z[i] % np.uint64(n - i))
        pool[i], pool[j] = pool[j], pool[i]
    return state, pool[:k].copy()
