"""Cayley-Neumann parameterization of block orthogonal factors.

Each block carries b(b-1)/2 free parameters packed in row-major strict
upper-triangle order; unpacking gives a skew-symmetric Q, and the block
factor is the truncated Cayley transform

    G = (I + Q)(I + sum_{i=1..k} Q^i),

which approximates the exact transform (I + Q)(I - Q)^{-1} with error
O(||Q||^{k+1}) and costs k block products.  For the default k = 3 the
expansion regroups as

    G = 2 (Q + Q^2 + Q^2 Q) + Q^2 Q^2 + I,

exactly three block products (Q^2, Q^2 Q, Q^2 Q^2), and Q and Q^2 are
cached because the closed-form backward reuses them.  The backward for
k = 3 evaluates the gradient of the quartic polynomial in six block
products:

    N1 = dG
    N2 = N1 Q^T + Q^T N1
    dQ = 2 (N1 + N2) + 2 Q^T N2 + (Q^2)^T N2 + 2 N1 (Q^2)^T + N2 (Q^2)^T

Expanding the line above reproduces, term by term, the adjoint of
I + 2Q + 2Q^2 + 2Q^3 + Q^4 with respect to an unstructured Q; the final
projection onto packed coordinates (g_ij = dQ_ij - dQ_ji) accounts for
skew-symmetry.  Other k fall back to a generic polynomial adjoint with
no fixed product count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .linalg import batched_matmul, batched_transpose, identity_stack
from .profiler import COUNTERS


@dataclass
class SkewParams:
    """Packed skew-symmetric parameters for a stack of blocks."""

    num_blocks: int
    block_dim: int
    packed: np.ndarray  # (num_blocks, block_dim*(block_dim-1)//2)

    def __post_init__(self):
        want = (self.num_blocks, num_pairs(self.block_dim))
        if self.packed.shape != want:
            raise ShapeError(f"packed shape {self.packed.shape}, expected {want}")

    @classmethod
    def zeros(cls, num_blocks: int, block_dim: int, dtype=np.float64) -> "SkewParams":
        if num_blocks < 1 or block_dim < 1:
            raise ShapeError(f"bad block layout ({num_blocks}, {block_dim})")
        return cls(num_blocks, block_dim, np.zeros((num_blocks, num_pairs(block_dim)), dtype=dtype))


def num_pairs(block_dim: int) -> int:
    return block_dim * (block_dim - 1) // 2


def _pair_indices(block_dim: int):
    # row-major strict upper triangle: (0,1), (0,2), ..., (1,2), ...
    return np.triu_indices(block_dim, k=1)


def skew_from_packed(params: SkewParams) -> np.ndarray:
    """Unpack to a (num_blocks, b, b) skew-symmetric stack."""
    b = params.block_dim
    rows, cols = _pair_indices(b)
    q = np.zeros((params.num_blocks, b, b), dtype=params.packed.dtype)
    q[:, rows, cols] = params.packed
    q[:, cols, rows] = -params.packed
    return q


def packed_grad_from_skew_grad(dq: np.ndarray) -> np.ndarray:
    """Project an unstructured block-stack gradient onto packed coords."""
    if dq.ndim != 3 or dq.shape[1] != dq.shape[2]:
        raise ShapeError(f"expected a square block stack, got {dq.shape}")
    rows, cols = _pair_indices(dq.shape[1])
    return dq[:, rows, cols] - dq[:, cols, rows]


@dataclass
class CnpCache:
    """Saved operands for the backward pass."""

    k: int
    q: np.ndarray
    qsq: np.ndarray | None  # k == 3 fast path
    powers: list | None  # generic path: [Q^1 .. Q^k]


def cnp_forward(q: np.ndarray, neumann_k: int = 3):
    """Evaluate the truncated Cayley transform blockwise.

    Returns ``(g, cache)`` where ``g`` is the (num_blocks, b, b) factor
    stack and ``cache`` feeds ``cnp_backward``.
    """
    if q.ndim != 3 or q.shape[1] != q.shape[2]:
        raise ShapeError(f"expected a square block stack, got {q.shape}")
    if neumann_k < 1:
        raise ConfigError(f"neumann_k must be >= 1, got {neumann_k}")
    if neumann_k == 3:
        qsq = batched_matmul(q, q)
        qcube = batched_matmul(qsq, q)
        qquad = batched_matmul(qsq, qsq)
        g = 2.0 * (q + qsq + qcube) + qquad
        idx = np.arange(q.shape[1])
        g[:, idx, idx] += 1.0
        return g, CnpCache(k=3, q=q, qsq=qsq, powers=None)
    powers = [q]
    for _ in range(neumann_k - 1):
        powers.append(batched_matmul(powers[-1], q))
    eye = identity_stack(q.shape[0], q.shape[1], dtype=q.dtype)
    series = eye.copy()
    for p in powers:
        series += p
    g = batched_matmul(eye + q, series)
    return g, CnpCache(k=neumann_k, q=q, qsq=None, powers=powers)


def cnp_backward(cache: CnpCache, dg: np.ndarray) -> np.ndarray:
    """Adjoint of ``cnp_forward`` with respect to the full Q stack.

    The k = 3 path runs the six-product closed form.  Callers project
    the result with ``packed_grad_from_skew_grad``.
    """
    if dg.shape != cache.q.shape:
        raise ShapeError(f"cotangent shape {dg.shape} does not match Q {cache.q.shape}")
    if cache.qsq is not None:
        qt = batched_transpose(cache.q)
        qsqt = batched_transpose(cache.qsq)
        n1 = dg
        n2 = batched_matmul(n1, qt) + batched_matmul(qt, n1)
        t3 = batched_matmul(qt, n2)
        t4 = batched_matmul(qsqt, n2)
        t5 = batched_matmul(n1, qsqt)
        t6 = batched_matmul(n2, qsqt)
        return 2.0 * (n1 + n2) + 2.0 * t3 + t4 + 2.0 * t5 + t6
    # generic polynomial adjoint: G = A B, A = I + Q, B = I + sum Q^i
    q = cache.q
    eye = identity_stack(q.shape[0], q.shape[1], dtype=q.dtype)
    series = eye.copy()
    for p in cache.powers:
        series += p
    tp = [eye] + [batched_transpose(p) for p in cache.powers]  # (Q^j)^T, j = 0..k
    dq = batched_matmul(dg, batched_transpose(series))
    ds = batched_matmul(batched_transpose(eye + q), dg)
    for i in range(1, cache.k + 1):
        for j in range(i):
            dq = dq + batched_matmul(batched_matmul(tp[j], ds), tp[i - 1 - j])
    return dq


def cayley_exact(q: np.ndarray) -> np.ndarray:
    """Exact Cayley transform (I + Q)(I - Q)^{-1}, blockwise.

    Solved with partially pivoted dense factorizations in float64 and
    cast back; this is the merge-time reference the truncation is
    measured against.
    """
    if q.ndim != 3 or q.shape[1] != q.shape[2]:
        raise ShapeError(f"expected a square block stack, got {q.shape}")
    q64 = q.astype(np.float64)
    eye = identity_stack(q.shape[0], q.shape[1])
    # X (I - Q) = I + Q  solved as (I - Q)^T X^T = (I + Q)^T
    lhs = np.ascontiguousarray((eye - q64).transpose(0, 2, 1))
    rhs = np.ascontiguousarray((eye + q64).transpose(0, 2, 1))
    sol = np.linalg.solve(lhs, rhs)
    return np.ascontiguousarray(sol.transpose(0, 2, 1)).astype(q.dtype)
