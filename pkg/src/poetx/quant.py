"""Per-row symmetric int8 storage for frozen base weights.

Each row is scaled by absmax/127 and rounded to int8 (half-to-even,
codes clipped to [-127, 127] so the grid is symmetric).  All-zero rows
get scale 1.0 and zero codes.  The elementwise reconstruction error is
at most scale/2 per entry.

Live paths dequantize one row (mm2) or one column (its adjoint) at a
time; a full float copy is only ever built at merge or in audits, and
both kinds of access bump profiler counters so tests can assert that
the full weight never appears inside a training step.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .profiler import COUNTERS


class QuantizedMatrix:
    def __init__(self, codes: np.ndarray, scales: np.ndarray, float_dtype=np.float32):
        if codes.ndim != 2 or codes.dtype != np.int8:
            raise ShapeError(f"codes must be 2-D int8, got {codes.shape} {codes.dtype}")
        if scales.shape != (codes.shape[0],):
            raise ShapeError(f"scales shape {scales.shape} does not match rows {codes.shape[0]}")
        self.codes = codes
        self.scales = scales.astype(float_dtype)
        self.float_dtype = np.dtype(float_dtype)

    @property
    def shape(self):
        return self.codes.shape

    @property
    def nbytes(self) -> int:
        return self.codes.nbytes + self.scales.nbytes

    @classmethod
    def quantize(cls, w: np.ndarray) -> "QuantizedMatrix":
        if w.ndim != 2:
            raise ShapeError(f"expected a 2-D weight, got {w.shape}")
        absmax = np.max(np.abs(w.astype(np.float64)), axis=1)
        scales = np.where(absmax > 0.0, absmax / 127.0, 1.0)
        codes = np.rint(w.astype(np.float64) / scales[:, None])
        codes = np.clip(codes, -127, 127).astype(np.int8)
        return cls(codes, scales, float_dtype=w.dtype)

    def dequant_row(self, k: int) -> np.ndarray:
        COUNTERS.row_dequants += 1
        return self.codes[k, :].astype(self.float_dtype) * self.scales[k]

    def dequant_col(self, j: int) -> np.ndarray:
        COUNTERS.row_dequants += 1
        return self.codes[:, j].astype(self.float_dtype) * self.scales

    def dequantize(self) -> np.ndarray:
        """Full float reconstruction.  Merge and audit paths only."""
        COUNTERS.full_dequants += 1
        return self.codes.astype(self.float_dtype) * self.scales[:, None]

    def gather(self, row_idx: np.ndarray, col_idx: np.ndarray) -> "QuantizedMatrix":
        """Row/column permutation applied in the quantized domain.

        Per-row scales ride along with their rows and column gathers
        leave each row's absmax unchanged, so this commutes exactly with
        dequantization; no requantization error is introduced.
        """
        return QuantizedMatrix(
            np.ascontiguousarray(self.codes[row_idx, :][:, col_idx]),
            self.scales[row_idx].copy(),
            float_dtype=self.float_dtype,
        )
