"""Run configuration: a flat key=value schema with strict parsing.

Files use one ``key = value`` pair per line with ``#`` comments; the
command line can override any key with ``--key value``.  Unknown keys
are hard errors listing the valid vocabulary, and cross-field
consistency (divisibility by the block size, quantization implying the
mem variant, warmup inside the horizon) is checked once at the end.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

TASKS = ("regression", "char-lm", "coverage", "spectrum-audit", "profile")
OPTIMIZERS = ("poet", "dense-adamw")
TRAIN_TASKS = ("regression", "char-lm")


@dataclass
class TrainConfig:
    task: str = "regression"
    optimizer: str = "poet"
    variant: str = "fast"
    quantized: bool = False
    neumann_k: int = 3
    block_size: int = 4
    precision: int = 32
    seed: int = 0
    batch_size: int = 32
    total_steps: int = 1000
    log_every: int = 50
    checkpoint_every: int = 0  # 0: only a final checkpoint
    resume: str = ""
    out_dir: str = "runs/latest"
    data_path: str = ""
    # model dims
    in_dim: int = 16
    hidden_dim: int = 32
    out_dim: int = 16
    depth: int = 2
    embed_dim: int = 16
    context_len: int = 8
    nonlinearity: str = "tanh"
    weight_std: float = 0.0  # 0: 1/sqrt(fan_in)
    # schedule
    base_lr: float = 5e-4
    poet_lr_scale: float = 0.5
    warmup_steps: int = 100
    min_lr_ratio: float = 0.01
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    post_merge_clip_start: float = 0.01
    post_merge_clip_ramp: int = 10
    post_merge_clip_window: int = 2000
    merge_gap: int = 400
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    spectrum_audit: bool = False
    val_examples: int = 128
    # coverage task
    coverage_dim: int = 64
    coverage_steps: int = 100
    coverage_mode: str = "block"  # block | row-col
    coverage_fraction: float = 0.125
    # spectrum-audit task
    audit_merges: int = 10
    audit_steps: int = 10
    audit_dim: int = 64
    audit_mode: str = "cnp"  # cnp | cayley
    audit_lr: float = 1e-3
    # profile task
    profile_batch: int = 16
    profile_m: int = 64
    profile_n: int = 64
    profile_reps: int = 30
    profile_warmup: int = 5

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64


_FIELDS = {f.name: f.type for f in fields(TrainConfig)}
_TRUE = ("1", "true", "yes", "on")
_FALSE = ("0", "false", "no", "off")


def _convert(key: str, raw: str):
    kind = _FIELDS[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {kind})") from None


def parse_config_file(path: str) -> dict:
    """Read key=value lines into a raw string mapping."""
    p = Path(path)
    if not p.is_file():
        raise DataError(f"config file not found: {path}")
    mapping: dict[str, str] = {}
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = text.split("=", 1)
        key = key.strip()
        if key in mapping:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key}")
        mapping[key] = value.strip()
    return mapping


def config_from_mapping(mapping: dict) -> TrainConfig:
    unknown = sorted(set(mapping) - set(_FIELDS))
    if unknown:
        raise ConfigError(
            f"unknown config keys: {', '.join(unknown)}; valid keys: {', '.join(sorted(_FIELDS))}"
        )
    cfg = TrainConfig(**{k: _convert(k, str(v)) for k, v in mapping.items()})
    validate_config(cfg)
    return cfg


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def validate_config(cfg: TrainConfig) -> None:
    _require(cfg.task in TASKS, f"task must be one of {TASKS}, got {cfg.task!r}")
    _require(cfg.optimizer in OPTIMIZERS, f"optimizer must be one of {OPTIMIZERS}")
    _require(cfg.variant in ("fast", "mem"), f"variant must be fast or mem, got {cfg.variant!r}")
    _require(cfg.precision in (32, 64), f"precision must be 32 or 64, got {cfg.precision}")
    _require(cfg.nonlinearity in ("tanh", "none"), "nonlinearity must be tanh or none")
    _require(cfg.neumann_k >= 1, "neumann_k must be >= 1")
    _require(cfg.block_size >= 1, "block_size must be >= 1")
    _require(cfg.batch_size >= 1 and cfg.total_steps >= 1 and cfg.log_every >= 1,
             "batch_size, total_steps and log_every must be positive")
    _require(cfg.merge_gap >= 1, "merge_gap must be >= 1")
    _require(cfg.base_lr > 0 and cfg.poet_lr_scale > 0, "learning rates must be positive")
    _require(0.0 <= cfg.min_lr_ratio <= 1.0, "min_lr_ratio must lie in [0, 1]")
    _require(cfg.clip_norm > 0 and cfg.post_merge_clip_start > 0, "clip thresholds must be positive")
    _require(cfg.post_merge_clip_ramp >= 1, "post_merge_clip_ramp must be >= 1")
    _require(cfg.checkpoint_every >= 0 and cfg.val_examples >= 1, "bad checkpoint/validation counts")
    if cfg.quantized:
        _require(cfg.variant == "mem", "quantized base weights require variant=mem")
        _require(cfg.optimizer == "poet", "quantized runs train rotation parameters only")
    if cfg.task in TRAIN_TASKS:
        _require(cfg.warmup_steps < cfg.total_steps, "warmup_steps must be below total_steps")
        if cfg.task == "regression":
            dims = {"in_dim": cfg.in_dim, "out_dim": cfg.out_dim}
            if cfg.depth > 1:
                dims["hidden_dim"] = cfg.hidden_dim
        else:
            _require(bool(cfg.data_path), "char-lm requires data_path")
            dims = {"context_len*embed_dim": cfg.context_len * cfg.embed_dim, "vocab": 256}
            if cfg.depth > 1:
                dims["hidden_dim"] = cfg.hidden_dim
        for name, value in dims.items():
            _require(value >= 1, f"{name} must be positive")
            _require(
                value % cfg.block_size == 0,
                f"{name}={value} is not divisible by block_size={cfg.block_size}",
            )
    if cfg.task == "coverage":
        _require(cfg.coverage_mode in ("block", "row-col"), "coverage_mode must be block or row-col")
        _require(0.0 < cfg.coverage_fraction <= 1.0, "coverage_fraction must lie in (0, 1]")
        _require(cfg.coverage_dim % cfg.block_size == 0, "coverage_dim must be divisible by block_size")
    if cfg.task == "spectrum-audit":
        _require(cfg.audit_mode in ("cnp", "cayley"), "audit_mode must be cnp or cayley")
        _require(cfg.audit_dim % cfg.block_size == 0, "audit_dim must be divisible by block_size")
        _require(cfg.audit_merges >= 0, "audit_merges must be >= 0")
        _require(cfg.audit_steps >= 1, "audit_steps must be positive")
    if cfg.task == "profile":
        _require(cfg.profile_m % cfg.block_size == 0 and cfg.profile_n % cfg.block_size == 0,
                 "profile dims must be divisible by block_size")
        _require(cfg.profile_reps >= 1, "profile_reps must be >= 1")


def config_to_text(cfg: TrainConfig) -> str:
    """Canonical serialization, field order, one pair per line."""
    lines = [f"{f.name}={getattr(cfg, f.name)}" for f in fields(TrainConfig)]
    return "\n".join(lines) + "\n"


MODEL_KEYS = (
    "task", "optimizer", "variant", "quantized", "neumann_k", "block_size", "precision",
    "seed", "in_dim", "hidden_dim", "out_dim", "depth", "embed_dim", "context_len",
    "nonlinearity", "weight_std",
)


def check_resume_compatible(stored_text: str, cfg: TrainConfig) -> None:
    """Model-defining keys must match between checkpoint and active config."""
    stored = {}
    for line in stored_text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            stored[k] = v
    for key in MODEL_KEYS:
        current = str(getattr(cfg, key))
        if key in stored and stored[key] != current:
            raise ConfigError(
                f"resume mismatch on {key}: checkpoint has {stored[key]!r}, config has {current!r}"
            )
