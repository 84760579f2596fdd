"""Spectrum-preserving training of linear layers via block-stochastic
orthogonal equivalence transforms.

The effective weight of a layer is R·W·P where W stays frozen between
merges and R, P are near-orthogonal factors built from permutations and
block-diagonal Cayley-Neumann rotations.  Only the skew parameters of
the rotations train, so optimizer state is tiny, and the forward runs
as three small multiplications plus index gathers instead of touching a
dense m x n product.
"""

from .blockdiag import BlockDiagonalFactor, apply_to_features, assemble_dense, orthogonality_error
from .checkpoint import load_checkpoint, save_checkpoint
from .cnp import SkewParams, cayley_exact, cnp_backward, cnp_forward, skew_from_packed
from .config import TrainConfig, config_from_mapping, parse_config_file, validate_config
from .data import ByteCorpus, load_corpus, sample_batch, unigram_entropy, val_batches
from .errors import (
    CheckpointError,
    ConfigError,
    ConvergenceError,
    DataError,
    NumericsError,
    PoetxError,
    ShapeError,
    StateError,
)
from .layer import LayerCache, LayerGrads, MergeAudit, PoetLinearLayer, init_layer
from .linalg import Rng, gaussian_matrix, matmul, spectral_norm, svd_singular_values
from .models import Model, build_char_lm, build_model, build_regression_model
from .optim import AdamWState, ScheduleConfig, adamw_init, adamw_step, clip_threshold_at, global_clip, lr_at
from .permute import PermutationMap, permute_cols, permute_features, permute_rows, sample_permutation
from .profiler import COUNTERS, ActivationLedger, OpCounters
from .quant import QuantizedMatrix
from .runner import run_coverage, run_profile, run_spectrum_audit, run_train
from .tape import Batch, DenseOp, EmbedOp, PoetOp, Tape, TanhOp, backward_graph, forward_graph

__version__ = "0.1.0"

__all__ = [
    "ActivationLedger",
    "AdamWState",
    "Batch",
    "BlockDiagonalFactor",
    "ByteCorpus",
    "COUNTERS",
    "CheckpointError",
    "ConfigError",
    "ConvergenceError",
    "DataError",
    "DenseOp",
    "EmbedOp",
    "LayerCache",
    "LayerGrads",
    "MergeAudit",
    "Model",
    "NumericsError",
    "OpCounters",
    "PermutationMap",
    "PoetLinearLayer",
    "PoetOp",
    "PoetxError",
    "QuantizedMatrix",
    "Rng",
    "ScheduleConfig",
    "ShapeError",
    "SkewParams",
    "StateError",
    "Tape",
    "TanhOp",
    "TrainConfig",
    "adamw_init",
    "adamw_step",
    "apply_to_features",
    "assemble_dense",
    "backward_graph",
    "build_char_lm",
    "build_model",
    "build_regression_model",
    "cayley_exact",
    "clip_threshold_at",
    "cnp_backward",
    "cnp_forward",
    "config_from_mapping",
    "forward_graph",
    "gaussian_matrix",
    "global_clip",
    "init_layer",
    "load_checkpoint",
    "load_corpus",
    "lr_at",
    "matmul",
    "orthogonality_error",
    "parse_config_file",
    "permute_cols",
    "permute_features",
    "permute_rows",
    "run_coverage",
    "run_profile",
    "run_spectrum_audit",
    "run_train",
    "sample_batch",
    "sample_permutation",
    "save_checkpoint",
    "skew_from_packed",
    "spectral_norm",
    "svd_singular_values",
    "unigram_entropy",
    "val_batches",
    "validate_config",
]
