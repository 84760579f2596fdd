"""Dense numeric core: deterministic matmuls, Jacobi SVD, seeded RNG.

All products accumulate over the shared dimension in ascending index
order, one rank-1 update at a time.  That makes every product bitwise
reproducible and bitwise equal to a naive triple loop in the same dtype,
which the rest of the package relies on (recomputation in the mem
variant must reproduce the forward tensors exactly, not just closely).
BLAS reductions do not give that guarantee, so we do not use them for
products; vector dot products inside the SVD are fine because the SVD
contract is tolerance-based.

Matrices are row-major 2-D arrays in float32 or float64.  Transposes are
explicit copies (``transpose``) or explicit transposed-product routines
(``matmul_abt``, ``matmul_atb``); there is no lazy transpose state.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

from .errors import ConvergenceError, NumericsError, ShapeError
from .profiler import COUNTERS

FLOAT_DTYPES = (np.float32, np.float64)


def _check_2d(a, name: str) -> None:
    if not isinstance(a, np.ndarray) or a.ndim != 2:
        raise ShapeError(f"{name} must be a 2-D ndarray, got {getattr(a, 'shape', type(a))}")


def _check_same_dtype(a, b) -> None:
    if a.dtype != b.dtype:
        raise ShapeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    if a.dtype not in FLOAT_DTYPES:
        raise ShapeError(f"unsupported dtype {a.dtype}; use float32 or float64")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` with ascending-k rank-1 accumulation.

    Bitwise equal to the triple-loop reference in the same dtype.
    """
    _check_2d(a, "a")
    _check_2d(b, "b")
    _check_same_dtype(a, b)
    m, n = a.shape
    n2, p = b.shape
    if n != n2:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    COUNTERS.dense_matmuls += 1
    out = np.zeros((m, p), dtype=a.dtype)
    tmp = np.empty((m, p), dtype=a.dtype)
    for k in range(n):
        np.multiply(a[:, k, None], b[k, None, :], out=tmp)
        np.add(out, tmp, out=out)
    return out


def matmul_abt(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b.T`` without materializing ``b.T``.

    Same accumulation order as ``matmul(a, transpose(b))``, so the two
    are bitwise equal; this form just avoids the transposed copy, which
    matters when ``b`` is weight-shaped or stored quantized.
    """
    _check_2d(a, "a")
    _check_2d(b, "b")
    _check_same_dtype(a, b)
    m, n = a.shape
    r, n2 = b.shape
    if n != n2:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}.T")
    COUNTERS.dense_matmuls += 1
    out = np.zeros((m, r), dtype=a.dtype)
    tmp = np.empty((m, r), dtype=a.dtype)
    for k in range(n):
        np.multiply(a[:, k, None], b[None, :, k], out=tmp)
        np.add(out, tmp, out=out)
    return out


def matmul_atb(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a.T @ b`` without materializing ``a.T``."""
    _check_2d(a, "a")
    _check_2d(b, "b")
    _check_same_dtype(a, b)
    n, m = a.shape
    n2, p = b.shape
    if n != n2:
        raise ShapeError(f"inner dimensions differ: {a.shape}.T @ {b.shape}")
    COUNTERS.dense_matmuls += 1
    out = np.zeros((m, p), dtype=a.dtype)
    tmp = np.empty((m, p), dtype=a.dtype)
    for k in range(n):
        np.multiply(a[k, :, None], b[k, None, :], out=tmp)
        np.add(out, tmp, out=out)
    return out


def transpose(a: np.ndarray) -> np.ndarray:
    """Explicit contiguous transpose copy."""
    _check_2d(a, "a")
    return np.ascontiguousarray(a.T)


def batched_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stack product ``out[i] = a[i] @ b[i]`` for 3-D stacks.

    Accumulates over the shared middle dimension in ascending order, so
    each slice is bitwise equal to ``matmul(a[i], b[i])``.  Counts one
    block matmul per stack entry.
    """
    if a.ndim != 3 or b.ndim != 3:
        raise ShapeError(f"expected 3-D stacks, got {a.shape} and {b.shape}")
    _check_same_dtype(a, b)
    nb, m, n = a.shape
    nb2, n2, p = b.shape
    if nb != nb2 or n != n2:
        raise ShapeError(f"stack shapes incompatible: {a.shape} @ {b.shape}")
    COUNTERS.block_matmuls += nb
    out = np.zeros((nb, m, p), dtype=a.dtype)
    tmp = np.empty((nb, m, p), dtype=a.dtype)
    for k in range(n):
        np.multiply(a[:, :, k, None], b[:, k, None, :], out=tmp)
        np.add(out, tmp, out=out)
    return out


def batched_transpose(a: np.ndarray) -> np.ndarray:
    """Per-slice transpose of a 3-D stack, contiguous copy."""
    if a.ndim != 3:
        raise ShapeError(f"expected a 3-D stack, got {a.shape}")
    return np.ascontiguousarray(a.transpose(0, 2, 1))


def identity_stack(num_blocks: int, dim: int, dtype=np.float64) -> np.ndarray:
    out = np.zeros((num_blocks, dim, dim), dtype=dtype)
    idx = np.arange(dim)
    out[:, idx, idx] = 1.0
    return out


def gaussian_matrix(rows: int, cols: int, std: float, rng: "Rng", dtype=np.float64) -> np.ndarray:
    """I.i.d. zero-mean Gaussian matrix with the given std.

    Sampled in float64 and cast, so the float32 path sees the same
    underlying draws as the float64 path.
    """
    if rows < 0 or cols < 0:
        raise ShapeError(f"bad matrix shape ({rows}, {cols})")
    if std < 0:
        raise ShapeError(f"std must be nonnegative, got {std}")
    draw = rng.normal((rows, cols)) * std
    return draw.astype(dtype)


# ---------------------------------------------------------------------------
# singular values via one-sided Jacobi
# ---------------------------------------------------------------------------


def svd_singular_values(a: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100) -> np.ndarray:
    """Singular values of ``a``, descending, by one-sided Jacobi rotations.

    Columns of a working copy are rotated pairwise until every pair is
    numerically orthogonal relative to its column norms; the singular
    values are then the column norms.  Runs in float64 regardless of the
    input dtype.  Raises ``ConvergenceError`` (with the worst remaining
    relative off-diagonal as ``residual``) if ``max_sweeps`` full sweeps
    do not converge.
    """
    _check_2d(a, "a")
    work = np.array(a, dtype=np.float64)
    if work.shape[0] < work.shape[1]:
        work = work.T.copy()  # one-sided Jacobi wants tall-or-square
    m, n = work.shape
    if n == 0:
        return np.zeros(0)
    norms = np.einsum("ij,ij->j", work, work)  # squared column norms, kept current
    worst = 0.0
    for _ in range(max_sweeps):
        rotated = False
        worst = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = norms[p]
                beta = norms[q]
                gamma = float(work[:, p] @ work[:, q])
                scale = math.sqrt(alpha * beta)
                if scale <= 0.0 or abs(gamma) <= tol * scale:
                    continue
                worst = max(worst, abs(gamma) / scale)
                rotated = True
                # classic Jacobi rotation annihilating the (p, q) correlation
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                col_p = work[:, p].copy()
                work[:, p] = c * col_p - s * work[:, q]
                work[:, q] = s * col_p + c * work[:, q]
                norms[p] = float(work[:, p] @ work[:, p])
                norms[q] = float(work[:, q] @ work[:, q])
        if not rotated:
            break
    else:
        raise ConvergenceError(
            f"Jacobi SVD did not converge in {max_sweeps} sweeps "
            f"(worst relative off-diagonal {worst:.3e})",
            residual=worst,
        )
    sv = np.sqrt(np.maximum(norms, 0.0))
    sv.sort()
    return sv[::-1].copy()


def spectral_norm(a: np.ndarray) -> float:
    """Largest singular value (Jacobi-based)."""
    sv = svd_singular_values(a)
    return float(sv[0]) if sv.size else 0.0


def hyperspherical_energy(w: np.ndarray, axis: str = "rows") -> float:
    """Sum of inverse pairwise distances between unit-normalized rows or
    columns of ``w``.

    A pure audit quantity: it depends only on the directions of the
    vectors, so it is invariant when the *other* side of the matrix is
    hit with an orthogonal map.
    """
    _check_2d(w, "w")
    if axis not in ("rows", "cols"):
        raise ShapeError(f"axis must be 'rows' or 'cols', got {axis!r}")
    v = np.array(w, dtype=np.float64)
    if axis == "cols":
        v = v.T.copy()
    norms = np.sqrt(np.einsum("ij,ij->i", v, v))
    if np.any(norms == 0.0):
        raise NumericsError("hyperspherical energy undefined for zero vectors")
    units = v / norms[:, None]
    gram = units @ units.T
    k = units.shape[0]
    energy = 0.0
    for i in range(k - 1):
        d2 = 2.0 - 2.0 * gram[i, i + 1 :]
        d2 = np.maximum(d2, 0.0)
        if np.any(d2 < 1e-24):
            raise NumericsError("hyperspherical energy diverges for coincident directions")
        energy += float(np.sum(1.0 / np.sqrt(d2)))
    return energy


# ---------------------------------------------------------------------------
# deterministic RNG
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


class Rng:
    """Counter-based generator (Philox) with named substreams.

    ``Rng.keyed(seed, *tags)`` hashes the tags into the second key word,
    giving an independent stream per (seed, tag tuple).  Streams for
    step-indexed draws carry the step in their tags, so resuming a run at
    step t regenerates exactly the draws an uninterrupted run would have
    made, with nothing about the generator stored in checkpoints.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    @classmethod
    def keyed(cls, seed: int, *tags) -> "Rng":
        text = "/".join(str(t) for t in tags)
        digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
        return cls(seed, int.from_bytes(digest, "little"))

    def normal(self, shape) -> np.ndarray:
        """Standard normal draws, always float64."""
        return self._gen.standard_normal(shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)
