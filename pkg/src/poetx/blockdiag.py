"""Block-diagonal orthogonal factors applied segmentwise.

A factor is a stack of square blocks sitting on the diagonal of a
dim x dim matrix that is never assembled on live paths.  Multiplying an
activation or a weight by the factor touches each length-b segment of
the relevant axis independently, so the cost is dim*b products per
vector instead of dim^2.  ``assemble_dense`` builds the full matrix for
oracle comparisons only and counts the allocation.

Accumulation order inside every apply matches ``linalg``: ascending
over the shared index, one rank-1 update at a time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .linalg import batched_matmul, batched_transpose, identity_stack
from .profiler import COUNTERS


@dataclass(frozen=True)
class BlockDiagonalFactor:
    """Stack of (num_blocks, b, b) diagonal blocks."""

    blocks: np.ndarray

    def __post_init__(self):
        b = self.blocks
        if not isinstance(b, np.ndarray) or b.ndim != 3 or b.shape[1] != b.shape[2]:
            raise ShapeError(f"blocks must be a (num_blocks, b, b) stack, got {getattr(b, 'shape', None)}")
        if b.shape[0] < 1 or b.shape[1] < 1:
            raise ShapeError(f"empty factor stack {b.shape}")

    @property
    def num_blocks(self) -> int:
        return int(self.blocks.shape[0])

    @property
    def block_dim(self) -> int:
        return int(self.blocks.shape[1])

    @property
    def dim(self) -> int:
        return self.num_blocks * self.block_dim


def _segments(a: np.ndarray, nb: int, b: int, axis: int) -> np.ndarray:
    a = np.ascontiguousarray(a)
    if axis == 1:
        return a.reshape(a.shape[0], nb, b)
    return a.reshape(nb, b, a.shape[1])


def apply_to_features(factor: BlockDiagonalFactor, x: np.ndarray, transpose: bool = False) -> np.ndarray:
    """Per-segment right multiply: segment s of each row maps through
    block s (or its transpose)."""
    if x.ndim != 2 or x.shape[1] != factor.dim:
        raise ShapeError(f"activation shape {x.shape} does not match factor dim {factor.dim}")
    nb, b = factor.num_blocks, factor.block_dim
    g = factor.blocks
    x3 = _segments(x, nb, b, axis=1)
    COUNTERS.block_matmuls += nb
    out = np.zeros_like(x3)
    tmp = np.empty_like(x3)
    for k in range(b):
        rhs = g[None, :, :, k] if transpose else g[None, :, k, :]
        np.multiply(x3[:, :, k, None], rhs, out=tmp)
        np.add(out, tmp, out=out)
    return out.reshape(x.shape[0], factor.dim)


def apply_to_weight_rows(factor: BlockDiagonalFactor, w: np.ndarray, transpose: bool = False) -> np.ndarray:
    """Left multiply ``w`` by the factor, segmenting the row axis."""
    if w.ndim != 2 or w.shape[0] != factor.dim:
        raise ShapeError(f"weight shape {w.shape} does not match factor dim {factor.dim}")
    nb, b = factor.num_blocks, factor.block_dim
    g = factor.blocks
    w3 = _segments(w, nb, b, axis=0)
    COUNTERS.block_matmuls += nb
    out = np.zeros_like(w3)
    tmp = np.empty_like(w3)
    for k in range(b):
        lhs = g[:, k, :, None] if transpose else g[:, :, k, None]
        np.multiply(lhs, w3[:, k, None, :], out=tmp)
        np.add(out, tmp, out=out)
    return out.reshape(factor.dim, w.shape[1])


def apply_to_weight_cols(factor: BlockDiagonalFactor, w: np.ndarray, transpose: bool = False) -> np.ndarray:
    """Right multiply ``w`` by the factor, segmenting the column axis."""
    if w.ndim != 2 or w.shape[1] != factor.dim:
        raise ShapeError(f"weight shape {w.shape} does not match factor dim {factor.dim}")
    return apply_to_features(factor, w, transpose=transpose)


def segmented_outer(x: np.ndarray, y: np.ndarray, block_dim: int) -> np.ndarray:
    """Per-block contraction over the batch: out[s] = x_s.T @ y_s.

    This is the gradient of ``apply_to_features`` with respect to the
    blocks.  Accumulates over batch rows in ascending order.
    """
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ShapeError(f"batch shapes incompatible: {x.shape} vs {y.shape}")
    if x.shape[1] % block_dim or y.shape[1] % block_dim:
        raise ShapeError(f"feature dims {x.shape[1]}, {y.shape[1]} not divisible by {block_dim}")
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"feature dims differ: {x.shape[1]} vs {y.shape[1]}")
    nb = x.shape[1] // block_dim
    x3 = _segments(x, nb, block_dim, axis=1)
    y3 = _segments(y, nb, block_dim, axis=1)
    COUNTERS.block_matmuls += nb
    out = np.zeros((nb, block_dim, block_dim), dtype=x.dtype)
    tmp = np.empty_like(out)
    for a in range(x.shape[0]):
        np.multiply(x3[a, :, :, None], y3[a, :, None, :], out=tmp)
        np.add(out, tmp, out=out)
    return out


def assemble_dense(factor: BlockDiagonalFactor) -> np.ndarray:
    """Materialize the full dim x dim matrix.  Oracle use only."""
    COUNTERS.dense_factor_allocs += 1
    nb, b = factor.num_blocks, factor.block_dim
    out = np.zeros((factor.dim, factor.dim), dtype=factor.blocks.dtype)
    for s in range(nb):
        out[s * b : (s + 1) * b, s * b : (s + 1) * b] = factor.blocks[s]
    return out


def orthogonality_error(blocks: np.ndarray) -> float:
    """Frobenius norm of G.T G - I over a whole stack."""
    gtg = batched_matmul(batched_transpose(blocks), blocks)
    eye = identity_stack(blocks.shape[0], blocks.shape[1], dtype=blocks.dtype)
    return float(np.sqrt(np.sum((gtg - eye) ** 2)))
