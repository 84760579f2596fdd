"""Model assembly: stage lists plus parameter bookkeeping.

Two families share the machinery: a deep linear (optionally tanh)
regression net, and a byte-level LM that embeds a context window and
predicts the next byte over a 256-way softmax.  Either family can be
built with reparameterized layers (frozen weights, trainable rotation
parameters) or as a plain dense baseline where the weight matrices
themselves train.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .layer import PoetLinearLayer, init_layer
from .linalg import Rng, gaussian_matrix
from .profiler import ActivationLedger
from .tape import DenseOp, EmbedOp, PoetOp, TanhOp

VOCAB = 256


@dataclass
class Model:
    stages: list
    loss_kind: str  # 'squared-error' | 'softmax-cross-entropy'
    input_kind: str  # 'float' | 'tokens'

    def params(self) -> dict:
        """Live references to every trainable array, keyed by name."""
        out = {}
        for op in self.stages:
            if isinstance(op, PoetOp):
                out[f"{op.layer.name}.q_r"] = op.layer.q_r.packed
                out[f"{op.layer.name}.q_p"] = op.layer.q_p.packed
            elif isinstance(op, DenseOp):
                out[op.name] = op.weight
            elif isinstance(op, EmbedOp):
                out[op.name] = op.table
        return out

    def param_groups(self) -> dict:
        """'poet' names get the scaled learning rate and merge resets;
        'dense' names (weights, embeddings) train at the base rate."""
        groups = {"poet": [], "dense": []}
        for op in self.stages:
            if isinstance(op, PoetOp):
                groups["poet"] += [f"{op.layer.name}.q_r", f"{op.layer.name}.q_p"]
            elif isinstance(op, DenseOp):
                groups["dense"].append(op.name)
            elif isinstance(op, EmbedOp):
                groups["dense"].append(op.name)
        return groups

    def poet_layers(self) -> list:
        return [op.layer for op in self.stages if isinstance(op, PoetOp)]

    def parameter_bytes(self) -> int:
        """All model state bytes: frozen bases, premerged copies, and
        every trainable array."""
        total = 0
        for op in self.stages:
            if isinstance(op, PoetOp):
                total += op.layer.base.nbytes + op.layer.premerged.nbytes
                total += op.layer.q_r.packed.nbytes + op.layer.q_p.packed.nbytes
            elif isinstance(op, (DenseOp, EmbedOp)):
                total += (op.weight if isinstance(op, DenseOp) else op.table).nbytes
        return total

    def trainable_bytes(self) -> int:
        return sum(p.nbytes for p in self.params().values())

    def register_memory(self, ledger: ActivationLedger) -> None:
        """Charge parameter/gradient categories.  Gradients mirror the
        trainable arrays only: frozen bases never get gradient buffers."""
        ledger.add_parameter_bytes(self.parameter_bytes())
        ledger.add_gradient_bytes(self.trainable_bytes())


def _linear_stage(m, n, idx, cfg, seed_tags) -> list:
    dtype = np.float32 if cfg.precision == 32 else np.float64
    rng = Rng.keyed(cfg.seed, "init", *seed_tags, idx)
    std = cfg.weight_std if cfg.weight_std > 0 else 1.0 / np.sqrt(m)
    if cfg.optimizer == "poet":
        layer = init_layer(
            m,
            n,
            cfg.block_size,
            rng,
            name=f"layer{idx}",
            variant=cfg.variant,
            neumann_k=cfg.neumann_k,
            dtype=dtype,
            weight_std=std,
        )
        if cfg.quantized:
            layer.quantize_base()
        return [PoetOp(layer)]
    return [DenseOp(f"layer{idx}", gaussian_matrix(m, n, std, rng, dtype=dtype))]


def _stack_linears(dims, cfg, seed_tags) -> list:
    stages = []
    for idx in range(len(dims) - 1):
        if idx > 0 and cfg.nonlinearity == "tanh":
            stages.append(TanhOp())
        stages += _linear_stage(dims[idx], dims[idx + 1], idx, cfg, seed_tags)
    return stages


def build_regression_model(cfg) -> Model:
    if cfg.depth < 1:
        raise ConfigError(f"depth must be >= 1, got {cfg.depth}")
    dims = [cfg.in_dim] + [cfg.hidden_dim] * (cfg.depth - 1) + [cfg.out_dim]
    return Model(_stack_linears(dims, cfg, ("reg",)), "squared-error", "float")


def build_char_lm(cfg) -> Model:
    if cfg.depth < 1:
        raise ConfigError(f"depth must be >= 1, got {cfg.depth}")
    dtype = np.float32 if cfg.precision == 32 else np.float64
    emb_rng = Rng.keyed(cfg.seed, "init", "embed")
    table = gaussian_matrix(VOCAB, cfg.embed_dim, 1.0 / np.sqrt(cfg.embed_dim), emb_rng, dtype=dtype)
    features = cfg.context_len * cfg.embed_dim
    dims = [features] + [cfg.hidden_dim] * (cfg.depth - 1) + [VOCAB]
    stages = [EmbedOp("embed", table)] + _stack_linears(dims, cfg, ("lm",))
    return Model(stages, "softmax-cross-entropy", "tokens")


def build_model(cfg) -> Model:
    if cfg.task == "regression":
        return build_regression_model(cfg)
    if cfg.task == "char-lm":
        return build_char_lm(cfg)
    raise ConfigError(f"task {cfg.task!r} does not define a model")
