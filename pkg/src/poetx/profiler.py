"""Operation counters and byte-exact activation accounting.

Two independent instruments live here:

* ``OpCounters`` is a process-global tally of the structural events the
  op-count and allocation contracts are written against (dense matmuls,
  per-block matmuls, dense permutation/factor materializations, full
  weight-sized intermediates).  Core routines bump these counters
  unconditionally; they are plain int increments and cost nothing.

* ``ActivationLedger`` tracks bytes by category for one training or
  profiling run.  Parameters, gradients and optimizer state are set once
  by whoever owns them; saved activations are registered per layer during
  forward and released after backward; transients track a running
  current/peak.  Every number is the exact ``nbytes`` of a real array, so
  summing the per-site increments reproduces the report totals exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields


@dataclass
class OpCounters:
    # one increment per dense matrix-matrix (or batch-by-matrix) product
    dense_matmuls: int = 0
    # one increment per block in a block-stacked product
    block_matmuls: int = 0
    # dense permutation matrices actually materialized (oracle paths only)
    perm_matrix_allocs: int = 0
    # block-diagonal factors assembled into a dense dim x dim matrix
    dense_factor_allocs: int = 0
    # weight-shaped (m x n) product intermediates, the weight-centric cost
    weight_intermediate_allocs: int = 0
    # full dequantized copies of an int8 weight (merge/audit only)
    full_dequants: int = 0
    # single rows/columns dequantized on the fly
    row_dequants: int = 0

    def snapshot(self) -> "OpCounters":
        return OpCounters(**{f.name: getattr(self, f.name) for f in fields(self)})

    def delta_since(self, before: "OpCounters") -> "OpCounters":
        return OpCounters(
            **{f.name: getattr(self, f.name) - getattr(before, f.name) for f in fields(self)}
        )

    def reset(self) -> None:
        for f in fields(self):
            setattr(self, f.name, 0)


COUNTERS = OpCounters()


def counters() -> OpCounters:
    """The process-global counter block."""
    return COUNTERS


class ActivationLedger:
    """Byte accounting for one run, split by category.

    Saved-activation bytes are registered under a layer key so reports can
    break them down per layer.  ``transient_alloc``/``transient_free`` pair
    around short-lived buffers; the peak is retained.
    """

    def __init__(self):
        self.parameter_bytes = 0
        self.gradient_bytes = 0
        self.optimizer_bytes = 0
        self.saved_by_layer: dict[str, int] = {}
        self.transient_current = 0
        self.transient_peak = 0
        # high-water mark of saved activations over the ledger's lifetime
        self.saved_peak = 0

    # -- category setters -------------------------------------------------

    def add_parameter_bytes(self, nbytes: int) -> None:
        self.parameter_bytes += int(nbytes)

    def add_gradient_bytes(self, nbytes: int) -> None:
        self.gradient_bytes += int(nbytes)

    def add_optimizer_bytes(self, nbytes: int) -> None:
        self.optimizer_bytes += int(nbytes)

    # -- activations -------------------------------------------------------

    def save_activation(self, layer_key: str, nbytes: int) -> None:
        self.saved_by_layer[layer_key] = self.saved_by_layer.get(layer_key, 0) + int(nbytes)
        self.saved_peak = max(self.saved_peak, self.saved_activation_bytes)

    def release_activations(self) -> None:
        """Drop all saved activations (end of backward)."""
        self.saved_by_layer.clear()

    @property
    def saved_activation_bytes(self) -> int:
        return sum(self.saved_by_layer.values())

    # -- transients ----------------------------------------------------------

    def transient_alloc(self, nbytes: int) -> None:
        self.transient_current += int(nbytes)
        self.transient_peak = max(self.transient_peak, self.transient_current)

    def transient_free(self, nbytes: int) -> None:
        self.transient_current -= int(nbytes)

    # -- reporting -----------------------------------------------------------

    def report(self) -> dict:
        return {
            "parameter_bytes": self.parameter_bytes,
            "gradient_bytes": self.gradient_bytes,
            "optimizer_bytes": self.optimizer_bytes,
            "saved_activation_bytes": self.saved_activation_bytes,
            "saved_activation_peak_bytes": self.saved_peak,
            "saved_by_layer": dict(self.saved_by_layer),
            "transient_peak_bytes": self.transient_peak,
        }
