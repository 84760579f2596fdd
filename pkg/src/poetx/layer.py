"""Linear layer trained through orthogonal equivalence transforms.

The layer owns a frozen base weight W (m x n) and two trainable
orthogonal factors in sandwich form,

    R = Psi_m^T G_R Psi_m,    P = Psi_n^T G_P Psi_n,

with Psi random permutations resampled at every merge and G block
diagonal, each block a Cayley-Neumann transform of packed skew
parameters.  The effective weight R W P shares its singular values with
W up to the truncation error of the transform, so training moves
energy between directions without inflating or collapsing the
spectrum.

Nothing weight-shaped is ever formed on the training path.  Two of the
four permutations are folded into a premerged copy of W at (re)init
time, and a forward pass is

    u = X Psi_m^T          gather
    a = u G_R              block products        (mm1)
    t = a W_pm             the one dense product (mm2)
    v = t G_P              block products        (mm3)
    Z = v Psi_n            gather

The ``fast`` variant saves the mm2 output t (batch x n) for backward;
``mem`` saves nothing and regathers/recomputes u, a, t from the input
ref, bitwise identically since every product accumulates in a fixed
order.  Packed parameters start (and restart) at zero, which makes the
factors exact identities: a fresh layer computes X @ W exactly.

``merge_and_reinit`` folds the current factors into the base weight,
zeroes the packed parameters, resamples both permutations, and rebuilds
the premerged copy, so optimization continues from a fresh identity
around the rotated weight.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .blockdiag import (
    BlockDiagonalFactor,
    apply_to_features,
    apply_to_weight_cols,
    apply_to_weight_rows,
    orthogonality_error,
    segmented_outer,
)
from .cnp import (
    CnpCache,
    SkewParams,
    cayley_exact,
    cnp_backward,
    cnp_forward,
    num_pairs,
    packed_grad_from_skew_grad,
    skew_from_packed,
)
from .errors import ConfigError, ShapeError, StateError
from .linalg import Rng, gaussian_matrix, matmul, matmul_abt, svd_singular_values
from .permute import PermutationMap, permute_cols, permute_features, permute_rows, sample_permutation
from .profiler import COUNTERS, ActivationLedger
from .quant import QuantizedMatrix

VARIANTS = ("fast", "mem")


@dataclass
class LayerCache:
    """Operands a single forward pass saves for its backward."""

    x: np.ndarray
    g_r: np.ndarray
    g_p: np.ndarray
    cnp_r: CnpCache
    cnp_p: CnpCache
    saved_mm2: np.ndarray | None  # fast variant only
    consumed: bool = False


@dataclass
class LayerGrads:
    q_r: np.ndarray  # packed, same shape as the parameters
    q_p: np.ndarray
    x: np.ndarray  # cotangent for the layer input


@dataclass
class MergeAudit:
    merge_index: int
    orth_err_r: float
    orth_err_p: float
    sv_drift: float = float("nan")  # max relative singular value change, if measured


class PoetLinearLayer:
    def __init__(
        self,
        base_weight: np.ndarray,
        block_size: int,
        rng: Rng,
        *,
        name: str = "poet",
        variant: str = "fast",
        neumann_k: int = 3,
    ):
        if base_weight.ndim != 2:
            raise ShapeError(f"base weight must be 2-D, got {base_weight.shape}")
        m, n = base_weight.shape
        if block_size < 1:
            raise ConfigError(f"block_size must be >= 1, got {block_size}")
        if m % block_size or n % block_size:
            raise ConfigError(
                f"layer dims ({m}, {n}) must both be divisible by block_size {block_size}"
            )
        if variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
        if neumann_k < 1:
            raise ConfigError(f"neumann_k must be >= 1, got {neumann_k}")
        if base_weight.dtype not in (np.float32, np.float64):
            raise ShapeError(f"unsupported dtype {base_weight.dtype}")
        if num_pairs(block_size) == 0:
            warnings.warn("block_size 1 leaves no trainable rotation parameters", stacklevel=2)

        self.name = name
        self.m = m
        self.n = n
        self.block_size = block_size
        self.variant = variant
        self.neumann_k = neumann_k
        self.dtype = base_weight.dtype
        self.base: np.ndarray | QuantizedMatrix = base_weight.copy()
        self.q_r = SkewParams.zeros(m // block_size, block_size, dtype=self.dtype)
        self.q_p = SkewParams.zeros(n // block_size, block_size, dtype=self.dtype)
        self.merge_count = 0
        self.perm_in = sample_permutation(m, rng)
        self.perm_out = sample_permutation(n, rng)
        self.premerged: np.ndarray | QuantizedMatrix = None
        self._refresh_premerged()

    # -- construction helpers ------------------------------------------------

    @property
    def quantized(self) -> bool:
        return isinstance(self.base, QuantizedMatrix)

    def trainable_param_count(self) -> int:
        return int(self.q_r.packed.size + self.q_p.packed.size)

    def set_permutations(self, perm_in: PermutationMap, perm_out: PermutationMap) -> None:
        """Install explicit permutations (checkpoint load, tests)."""
        if perm_in.n != self.m or perm_out.n != self.n:
            raise ShapeError("permutation sizes do not match layer dims")
        self.perm_in = perm_in
        self.perm_out = perm_out
        self._refresh_premerged()

    def _refresh_premerged(self) -> None:
        # premerged[i, j] = W[pi_in(i), pi_out(j)], i.e. Psi_m W Psi_n^T
        if self.quantized:
            self.premerged = self.base.gather(self.perm_in.forward, self.perm_out.forward)
        else:
            folded = permute_rows(self.base, self.perm_in, "forward")
            self.premerged = np.ascontiguousarray(permute_cols(folded, self.perm_out, "inverse"))

    def quantize_base(self) -> None:
        """Switch the frozen weight to int8 rows.  Mem variant only: the
        fast variant's saved mm2 output would defeat the point, and its
        adjoint would need weight rows kept live."""
        if self.variant != "mem":
            raise ConfigError("quantized base requires the mem variant")
        if not self.quantized:
            self.base = QuantizedMatrix.quantize(self.base)
            self._refresh_premerged()

    # -- factors ---------------------------------------------------------------

    def _factors(self):
        g_r, cache_r = cnp_forward(skew_from_packed(self.q_r), self.neumann_k)
        g_p, cache_p = cnp_forward(skew_from_packed(self.q_p), self.neumann_k)
        return g_r, cache_r, g_p, cache_p

    # -- the one dense product and its adjoint -----------------------------------

    def _mm2(self, a: np.ndarray) -> np.ndarray:
        if not self.quantized:
            return matmul(a, self.premerged)
        COUNTERS.dense_matmuls += 1
        out = np.zeros((a.shape[0], self.n), dtype=self.dtype)
        tmp = np.empty_like(out)
        for k in range(self.m):
            row = self.premerged.dequant_row(k)
            np.multiply(a[:, k, None], row[None, :], out=tmp)
            np.add(out, tmp, out=out)
        return out

    def _mm2_adjoint(self, dt: np.ndarray) -> np.ndarray:
        if not self.quantized:
            return matmul_abt(dt, self.premerged)
        COUNTERS.dense_matmuls += 1
        out = np.zeros((dt.shape[0], self.m), dtype=self.dtype)
        tmp = np.empty_like(out)
        for j in range(self.n):
            col = self.premerged.dequant_col(j)
            np.multiply(dt[:, j, None], col[None, :], out=tmp)
            np.add(out, tmp, out=out)
        return out

    # -- forward / backward -----------------------------------------------------

    def forward(self, x: np.ndarray, ledger: ActivationLedger | None = None):
        if x.ndim != 2 or x.shape[1] != self.m:
            raise ShapeError(f"input shape {x.shape} does not match layer ({self.m}, {self.n})")
        if x.dtype != self.dtype:
            raise ShapeError(f"input dtype {x.dtype} does not match layer dtype {self.dtype}")
        g_r, cache_r, g_p, cache_p = self._factors()
        u = permute_features(x, self.perm_in, "inverse")
        a = apply_to_features(BlockDiagonalFactor(g_r), u)
        t = self._mm2(a)
        v = apply_to_features(BlockDiagonalFactor(g_p), t)
        z = permute_features(v, self.perm_out, "forward")
        saved = t if self.variant == "fast" else None
        if saved is not None and ledger is not None:
            ledger.save_activation(self.name, saved.nbytes)
        cache = LayerCache(x=x, g_r=g_r, g_p=g_p, cnp_r=cache_r, cnp_p=cache_p, saved_mm2=saved)
        return z, cache

    def backward(self, cache: LayerCache, dz: np.ndarray) -> LayerGrads:
        if cache.consumed:
            raise StateError("layer cache already consumed by a previous backward")
        if dz.shape != (cache.x.shape[0], self.n):
            raise ShapeError(f"cotangent shape {dz.shape} does not match output")
        cache.consumed = True
        b = self.block_size
        dv = permute_features(dz, self.perm_out, "inverse")
        if cache.saved_mm2 is not None:
            t = cache.saved_mm2
        else:
            # recompute the forward chain up to mm2; same routines, same
            # accumulation order, so this is bitwise what forward produced
            u = permute_features(cache.x, self.perm_in, "inverse")
            a = apply_to_features(BlockDiagonalFactor(cache.g_r), u)
            t = self._mm2(a)
        dg_p = segmented_outer(t, dv, b)
        dt = apply_to_features(BlockDiagonalFactor(cache.g_p), dv, transpose=True)
        da = self._mm2_adjoint(dt)
        u = permute_features(cache.x, self.perm_in, "inverse")
        dg_r = segmented_outer(u, da, b)
        du = apply_to_features(BlockDiagonalFactor(cache.g_r), da, transpose=True)
        dx = permute_features(du, self.perm_in, "forward")
        grad_r = packed_grad_from_skew_grad(cnp_backward(cache.cnp_r, dg_r))
        grad_p = packed_grad_from_skew_grad(cnp_backward(cache.cnp_p, dg_p))
        return LayerGrads(q_r=grad_r, q_p=grad_p, x=dx)

    # -- merge -------------------------------------------------------------------

    def _transformed_base(self, use_exact_cayley: bool) -> np.ndarray:
        """Psi_m^T (G_R W_pm G_P) Psi_n as a dense array in layer dtype."""
        q_r = skew_from_packed(self.q_r)
        q_p = skew_from_packed(self.q_p)
        if use_exact_cayley:
            g_r, g_p = cayley_exact(q_r), cayley_exact(q_p)
        else:
            g_r, _ = cnp_forward(q_r, self.neumann_k)
            g_p, _ = cnp_forward(q_p, self.neumann_k)
        pm = self.premerged.dequantize() if self.quantized else self.premerged
        mid = apply_to_weight_rows(BlockDiagonalFactor(g_r), pm)
        mid = apply_to_weight_cols(BlockDiagonalFactor(g_p), mid)
        out = permute_rows(mid, self.perm_in, "inverse")
        return np.ascontiguousarray(permute_cols(out, self.perm_out, "forward"))

    def materialize_weight(self) -> np.ndarray:
        """Dense effective weight R W P, for audits and inference export."""
        return self._transformed_base(use_exact_cayley=False)

    def merge_and_reinit(
        self,
        rng: Rng,
        *,
        use_exact_cayley: bool = False,
        compute_sv_drift: bool = False,
    ) -> MergeAudit:
        q_r = skew_from_packed(self.q_r)
        q_p = skew_from_packed(self.q_p)
        if use_exact_cayley:
            err_r = orthogonality_error(cayley_exact(q_r))
            err_p = orthogonality_error(cayley_exact(q_p))
        else:
            err_r = orthogonality_error(cnp_forward(q_r, self.neumann_k)[0])
            err_p = orthogonality_error(cnp_forward(q_p, self.neumann_k)[0])
        new_base = self._transformed_base(use_exact_cayley)
        drift = float("nan")
        if compute_sv_drift:
            old = self.base.dequantize() if self.quantized else self.base
            sv_old = svd_singular_values(old)
            sv_new = svd_singular_values(new_base)
            denom = np.maximum(sv_old, np.finfo(np.float64).tiny)
            drift = float(np.max(np.abs(sv_new - sv_old) / denom))
        if self.quantized:
            self.base = QuantizedMatrix.quantize(new_base)
        else:
            self.base = new_base
        # identity factors around the rotated weight: zero in place so
        # optimizer state keyed to these arrays stays attached
        self.q_r.packed[...] = 0.0
        self.q_p.packed[...] = 0.0
        self.perm_in = sample_permutation(self.m, rng)
        self.perm_out = sample_permutation(self.n, rng)
        self._refresh_premerged()
        self.merge_count += 1
        return MergeAudit(self.merge_count, float(err_r), float(err_p), drift)


def init_layer(
    m: int,
    n: int,
    block_size: int,
    rng: Rng,
    *,
    name: str = "poet",
    variant: str = "fast",
    neumann_k: int = 3,
    dtype=np.float32,
    weight_std: float | None = None,
    base_weight: np.ndarray | None = None,
) -> PoetLinearLayer:
    """Build a layer with a Gaussian (or given) frozen base weight.

    Draw order off ``rng`` is weight, then input-side permutation, then
    output-side permutation.
    """
    if base_weight is None:
        std = (1.0 / np.sqrt(m)) if weight_std is None else float(weight_std)
        base_weight = gaussian_matrix(m, n, std, rng, dtype=dtype)
    else:
        if base_weight.shape != (m, n):
            raise ShapeError(f"base weight shape {base_weight.shape}, expected ({m}, {n})")
        base_weight = base_weight.astype(dtype)
    return PoetLinearLayer(
        base_weight, block_size, rng, name=name, variant=variant, neumann_k=neumann_k
    )
