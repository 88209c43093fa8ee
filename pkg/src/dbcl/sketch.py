"""Random sketching matrices, applied implicitly, plus their exact second-moment theory.

A sketch S (d x s, s < d) is never materialized in hot paths: we keep one
(bucket, sign) pair per input coordinate and compute products by signed
gather/scatter, which is O(n*d) instead of O(n*d*s).

Kinds
-----
countsketch          every coordinate hashes independently to one of s
                     buckets with a random sign (the canonical kind; all
                     variance formulas below assume it)
uniform_sampling     s columns sampled with replacement from the scaled
                     standard basis, column scale sqrt(d/s)
permuted_countsketch a random permutation of the coordinates is cut into s
                     buckets of q each; the d - s*q leftover coordinates map
                     to nothing (their columns are zero)
identity             s == d, one coordinate per bucket, all signs +1; used
                     to run unsketched layers through the same code path
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .linalg import DimensionError, as_matrix, rng_draw

KINDS = ("countsketch", "uniform_sampling", "permuted_countsketch", "identity")


class SketchSpecError(ValueError):
    """The requested sketch parameters are invalid."""


class UnsupportedKindError(TypeError):
    """The operation is not defined for this sketch kind."""


@dataclass(frozen=True)
class SketchSpec:
    """Everything needed to reconstruct a sketch deterministically."""
    d: int
    kind: str = "countsketch"
    s: int | None = None   # countsketch / uniform_sampling / identity
    q: int | None = None   # permuted_countsketch compression factor
    seed: int = 0

    def resolved_s(self) -> int:
        if self.kind == "permuted_countsketch":
            if self.q is None:
                raise SketchSpecError("permuted_countsketch needs q")
            return self.d // self.q
        if self.kind == "identity":
            return self.d
        if self.s is None:
            raise SketchSpecError(f"{self.kind} needs s")
        return self.s


class SketchMatrix:
    """Implicit d x s sketching matrix.

    For countsketch kinds, ``bucket[i]`` is coordinate i's bucket (-1 when
    the permuted variant dropped it) and ``sign[i]`` its sign.  For uniform
    sampling, ``src[j]`` is column j's source coordinate and every nonzero
    equals ``scale``.
    """

    def __init__(self, kind, d, s, bucket=None, sign=None, src=None, scale=1.0):
        self.kind = kind
        self.d = int(d)
        self.s = int(s)
        self.scale = float(scale)
        self.bucket = None if bucket is None else np.asarray(bucket, dtype=np.int64)
        self.sign = None if sign is None else np.asarray(sign, dtype=np.float64)
        self.src = None if src is None else np.asarray(src, dtype=np.int64)
        if self.kind == "uniform_sampling":
            if self.src is None or self.src.shape != (self.s,):
                raise SketchSpecError("uniform_sampling needs s source indices")
        else:
            if self.bucket is None or self.bucket.shape != (self.d,):
                raise SketchSpecError("countsketch kinds need one bucket per coordinate")
            if self.sign is None or self.sign.shape != (self.d,):
                raise SketchSpecError("countsketch kinds need one sign per coordinate")
            assigned = np.flatnonzero(self.bucket >= 0)
            order = assigned[np.argsort(self.bucket[assigned], kind="stable")]
            counts = np.bincount(self.bucket[assigned], minlength=self.s)
            starts = np.zeros(self.s, dtype=np.int64)
            starts[1:] = np.cumsum(counts)[:-1]
            self._order = order
            self._counts = counts
            self._starts = starts

    @property
    def dropped(self) -> np.ndarray:
        """Coordinates the permuted variant maps to no bucket."""
        if self.bucket is None:
            return np.empty(0, dtype=np.int64)
        return np.flatnonzero(self.bucket < 0)

    def bucket_sizes(self) -> np.ndarray:
        if self.kind == "uniform_sampling":
            raise UnsupportedKindError("uniform_sampling has no buckets")
        return self._counts.copy()


def identity_sketch(d: int) -> SketchMatrix:
    """The trivial full-rank sketch (apply is the identity map)."""
    return SketchMatrix("identity", d, d,
                        bucket=np.arange(d, dtype=np.int64),
                        sign=np.ones(d, dtype=np.float64))


def generate(spec: SketchSpec) -> SketchMatrix:
    """Construct the sketch a spec describes; deterministic in spec.seed.

    RNG consumption order is normative so that independent implementations
    agree bit-exactly:

    * countsketch: per coordinate i = 0..d-1, bucket draw then sign draw.
    * uniform_sampling: per column j = 0..s-1, one source draw.
    * permuted_countsketch: a Fisher-Yates shuffle of 0..d-1 (i from d-1
      down to 1, j = draw % (i+1)), then one sign draw per coordinate in
      ascending coordinate order.

    Buckets/sources are modulo reductions of 64-bit draws; signs take the
    draw's lowest bit (+1 when set).
    """
    if spec.kind not in KINDS:
        raise SketchSpecError(f"unknown sketch kind {spec.kind!r}")
    d = spec.d
    if d < 1:
        raise SketchSpecError("d must be positive")

    if spec.kind == "identity":
        return identity_sketch(d)

    if spec.kind == "countsketch":
        s = spec.resolved_s()
        if not 0 < s < d:
            raise SketchSpecError(f"countsketch needs 0 < s < d, got s={s}, d={d}")
        _, z = rng_draw(spec.seed, 2 * d)
        bucket = (z[0::2] % np.uint64(s)).astype(np.int64)
        sign = np.where(z[1::2] & np.uint64(1), 1.0, -1.0)
        return SketchMatrix("countsketch", d, s, bucket=bucket, sign=sign)

    if spec.kind == "uniform_sampling":
        s = spec.resolved_s()
        if not 0 < s < d:
            raise SketchSpecError(f"uniform_sampling needs 0 < s < d, got s={s}, d={d}")
        _, z = rng_draw(spec.seed, s)
        src = (z % np.uint64(d)).astype(np.int64)
        return SketchMatrix("uniform_sampling", d, s, src=src, scale=np.sqrt(d / s))

    # permuted_countsketch
    q = spec.q
    if q is None or q < 2:
        raise SketchSpecError(f"permuted_countsketch needs q >= 2, got {q}")
    s = d // q
    if s < 1:
        raise SketchSpecError(f"q={q} leaves no buckets for d={d}")
    perm = np.arange(d, dtype=np.int64)
    state, z = rng_draw(spec.seed, d - 1)
    for t, i in enumerate(range(d - 1, 0, -1)):
        j = int(z[t] % np.uint64(i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    table = perm[: s * q].reshape(q, s)  # column h holds bucket h's members
    bucket = np.full(d, -1, dtype=np.int64)
    for h in range(s):
        bucket[table[:, h]] = h
    _, z = rng_draw(state, d)
    sign = np.where(z & np.uint64(1), 1.0, -1.0)
    return SketchMatrix("permuted_countsketch", d, s, bucket=bucket, sign=sign)


# ------------------------------------------------------------------
# implicit products
# ------------------------------------------------------------------

def apply(a, sk: SketchMatrix) -> np.ndarray:
    """Right-multiply: (n x d) @ S -> (n x s), in O(n*d) for hashed kinds."""
    a = as_matrix(a)
    if a.shape[1] != sk.d:
        raise DimensionError(f"apply: {a.shape[1]} columns vs sketch d={sk.d}")
    if sk.kind == "uniform_sampling":
        return sk.scale * a[:, sk.src]
    out = np.zeros((a.shape[0], sk.s), dtype=np.float64)
    if sk._order.size == 0:
        return out
    signed = a * sk.sign
    nonempty = np.flatnonzero(sk._counts > 0)
    sums = np.add.reduceat(signed[:, sk._order], sk._starts[nonempty], axis=1)
    out[:, nonempty] = sums
    return out


def apply_transpose(c, sk: SketchMatrix) -> np.ndarray:
    """Right-multiply by the transpose: (n x s) @ S^T -> (n x d).

    For hashed kinds, output column i is sign[i] * c[:, bucket[i]]; dropped
    coordinates give zero columns.
    """
    c = as_matrix(c)
    if c.shape[1] != sk.s:
        raise DimensionError(f"apply_transpose: {c.shape[1]} columns vs sketch s={sk.s}")
    if sk.kind == "uniform_sampling":
        out = np.zeros((c.shape[0], sk.d), dtype=np.float64)
        np.add.at(out.T, sk.src, sk.scale * c.T)
        return out
    live = sk.bucket >= 0
    gathered = c[:, np.where(live, sk.bucket, 0)]
    return gathered * np.where(live, sk.sign, 0.0)


def apply_pinv(c, sk: SketchMatrix) -> np.ndarray:
    """Right-multiply by the Moore-Penrose inverse: (n x s) @ pinv(S) -> (n x d).

    CountSketch columns are mutually orthogonal (each coordinate feeds one
    bucket), so S^T S = diag(bucket sizes) and pinv(S) = diag(1/n_j) S^T
    with empty buckets contributing zero.
    """
    if sk.kind == "uniform_sampling":
        raise UnsupportedKindError("pinv path is defined for countsketch kinds only")
    c = as_matrix(c)
    if c.shape[1] != sk.s:
        raise DimensionError(f"apply_pinv: {c.shape[1]} columns vs sketch s={sk.s}")
    counts = sk._counts.astype(np.float64)
    inv = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
    return apply_transpose(c * inv, sk)


def materialize(sk: SketchMatrix) -> np.ndarray:
    """Dense d x s form, for tests and small-scale verification only."""
    if sk.d * sk.s > 10**6:
        raise SketchSpecError("refusing to materialize a sketch this large")
    m = np.zeros((sk.d, sk.s), dtype=np.float64)
    if sk.kind == "uniform_sampling":
        m[sk.src, np.arange(sk.s)] = sk.scale
        return m
    live = np.flatnonzero(sk.bucket >= 0)
    m[live, sk.bucket[live]] = sk.sign[live]
    return m


# ------------------------------------------------------------------
# exact second-moment theory (canonical countsketch)
# ------------------------------------------------------------------

def product_error_expectation(a, b, s: int) -> float:
    """Exact E ||A S S^T B^T - A B^T||_F^2 over countsketch randomness.

    For rows a_i of A and b_j of B the per-entry variance is
    (1/s) * (sum_{k != l} a_ik^2 b_jl^2 + sum_{k != l} a_ik b_jk a_il b_jl),
    which collapses to ||a_i||^2 ||b_j||^2 + <a_i, b_j>^2
    - 2 * sum_k a_ik^2 b_jk^2.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"column counts differ: {a.shape[1]} vs {b.shape[1]}")
    an = np.einsum("ik,ik->i", a, a)
    bn = np.einsum("jk,jk->j", b, b)
    inner = a @ b.T
    coll = (a * a) @ (b * b).T
    total = np.outer(an, bn) + inner**2 - 2.0 * coll
    return float(total.sum() / s)


def enumerate_countsketches(d: int, s: int):
    """Yield every d x s CountSketch matrix (s**d bucket maps x 2**d signs).

    Exhaustive-expectation oracle for the variance formulas; only sane for
    tiny d, s.
    """
    for buckets in itertools.product(range(s), repeat=d):
        bucket = np.asarray(buckets, dtype=np.int64)
        for signs in itertools.product((1.0, -1.0), repeat=d):
            yield SketchMatrix("countsketch", d, s,
                               bucket=bucket, sign=np.asarray(signs))
