"""Permutations as index maps, never as matrices.

A ``PermutationMap`` holds a bijection pi on {0..n-1} together with its
inverse.  Writing Psi for the matrix with Psi[i, j] = 1 iff j = pi(i),
the four products used by the sandwich parameterization reduce to pure
gather operations:

    (Psi  @ W)[i, :]  = W[pi(i), :]        rows, direction 'forward'
    (Psi.T @ W)[i, :] = W[pi^-1(i), :]     rows, direction 'inverse'
    (W @ Psi)[:, j]   = W[:, pi^-1(j)]     cols, direction 'forward'
    (W @ Psi.T)[:, j] = W[:, pi(j)]        cols, direction 'inverse'

``direction='forward'`` always means multiplying by Psi itself and
``'inverse'`` by Psi.T (= Psi^-1); which index array implements that
depends on the side, which is exactly the bookkeeping this module
exists to get right once.  ``dense_matrix`` materializes Psi for oracle
tests only and counts the allocation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .linalg import Rng
from .profiler import COUNTERS

_DIRECTIONS = ("forward", "inverse")


def _check_direction(direction: str) -> None:
    if direction not in _DIRECTIONS:
        raise ShapeError(f"direction must be one of {_DIRECTIONS}, got {direction!r}")


@dataclass(frozen=True)
class PermutationMap:
    """A bijection and its inverse as int32 index arrays."""

    forward: np.ndarray  # forward[i] = pi(i)
    inverse: np.ndarray  # inverse[pi(i)] = i

    def __post_init__(self):
        fwd = np.asarray(self.forward, dtype=np.int32)
        inv = np.asarray(self.inverse, dtype=np.int32)
        object.__setattr__(self, "forward", fwd)
        object.__setattr__(self, "inverse", inv)
        if fwd.ndim != 1 or inv.shape != fwd.shape:
            raise ShapeError("permutation index arrays must be 1-D and equal length")
        n = fwd.shape[0]
        if not np.array_equal(fwd[inv], np.arange(n, dtype=np.int32)):
            raise ShapeError("inverse array does not invert forward array")

    @property
    def n(self) -> int:
        return int(self.forward.shape[0])

    @classmethod
    def from_forward(cls, forward) -> "PermutationMap":
        fwd = np.asarray(forward, dtype=np.int32)
        if fwd.ndim != 1:
            raise ShapeError("forward index array must be 1-D")
        n = fwd.shape[0]
        counts = np.bincount(fwd, minlength=n) if n else np.zeros(0, dtype=int)
        if fwd.size and (fwd.min() < 0 or fwd.max() >= n or np.any(counts != 1)):
            raise ShapeError("forward index array is not a bijection")
        inv = np.empty(n, dtype=np.int32)
        inv[fwd] = np.arange(n, dtype=np.int32)
        return cls(forward=fwd, inverse=inv)

    @classmethod
    def identity(cls, n: int) -> "PermutationMap":
        idx = np.arange(n, dtype=np.int32)
        return cls(forward=idx, inverse=idx.copy())


def sample_permutation(n: int, rng: Rng) -> PermutationMap:
    """Uniformly random permutation of size n."""
    if n <= 0:
        raise ShapeError(f"permutation size must be positive, got {n}")
    return PermutationMap.from_forward(rng.permutation(n).astype(np.int32))


def permute_rows(w: np.ndarray, pm: PermutationMap, direction: str) -> np.ndarray:
    """Apply Psi (forward) or Psi.T (inverse) on the left of ``w``."""
    _check_direction(direction)
    if w.ndim != 2 or w.shape[0] != pm.n:
        raise ShapeError(f"row count {w.shape} does not match permutation size {pm.n}")
    idx = pm.forward if direction == "forward" else pm.inverse
    return w[idx, :]


def permute_cols(w: np.ndarray, pm: PermutationMap, direction: str) -> np.ndarray:
    """Apply Psi (forward) or Psi.T (inverse) on the right of ``w``."""
    _check_direction(direction)
    if w.ndim != 2 or w.shape[1] != pm.n:
        raise ShapeError(f"column count {w.shape} does not match permutation size {pm.n}")
    idx = pm.inverse if direction == "forward" else pm.forward
    return w[:, idx]


def permute_features(x: np.ndarray, pm: PermutationMap, direction: str) -> np.ndarray:
    """Permute the feature axis of a (batch, n) activation.

    Same semantics as ``permute_cols``: the batch multiplies the
    permutation from the left, features are columns.
    """
    return permute_cols(x, pm, direction)


def premerge_weight(w: np.ndarray, row_pm: PermutationMap, col_pm: PermutationMap) -> np.ndarray:
    """Fold the two inner permutations into the stored weight.

    Returns Psi_row @ W @ Psi_col.T, i.e. out[i, j] = W[pi_r(i), pi_c(j)].
    With this premerged copy the live forward path applies only the two
    outer permutations, halving the per-step gather count.
    """
    if w.ndim != 2 or w.shape[0] != row_pm.n or w.shape[1] != col_pm.n:
        raise ShapeError(
            f"weight shape {w.shape} does not match permutation sizes ({row_pm.n}, {col_pm.n})"
        )
    out = permute_rows(w, row_pm, "forward")
    return permute_cols(out, col_pm, "inverse")


def dense_matrix(pm: PermutationMap, dtype=np.float64) -> np.ndarray:
    """Materialize Psi as a dense 0/1 matrix.  Oracle use only."""
    COUNTERS.perm_matrix_allocs += 1
    n = pm.n
    out = np.zeros((n, n), dtype=dtype)
    out[np.arange(n), pm.forward] = 1.0
    return out
