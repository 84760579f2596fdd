"""Task runners behind the CLI subcommands.

``run_train`` drives the two toy tasks end to end: keyed batching, the
warmup/cosine schedule, post-merge clipping, AdamW on two parameter
groups, periodic merge-then-reinitialize, metrics CSV, checkpoints and
resume.  ``run_coverage`` simulates which weight entries the
block-stochastic and fully stochastic update patterns touch.
``run_spectrum_audit`` measures singular-value drift across repeated
merges.  ``run_profile`` counts and times four forward/backward
strategies side by side.

Everything is deterministic given (config, seed): batches, the
regression teacher, validation data and merge-time permutations all
come from generators keyed by purpose (and step where applicable), so a
resumed run replays the exact draw sequence of an uninterrupted one
without serializing generator state.
"""

from __future__ import annotations

import statistics
import time
from pathlib import Path

import numpy as np

from .blockdiag import BlockDiagonalFactor, assemble_dense, orthogonality_error
from .checkpoint import load_checkpoint, save_checkpoint
from .cnp import cnp_forward, skew_from_packed
from .config import TrainConfig, check_resume_compatible, config_to_text
from .data import load_corpus, sample_batch, unigram_entropy, val_batches
from .errors import CheckpointError, ConfigError, NumericsError
from .layer import init_layer
from .linalg import Rng, gaussian_matrix, matmul, matmul_abt, matmul_atb, spectral_norm, svd_singular_values
from .models import build_model
from .optim import ScheduleConfig, adamw_init, adamw_step, clip_threshold_at, global_clip, lr_at
from .permute import PermutationMap, permute_cols, permute_rows, sample_permutation
from .profiler import COUNTERS, ActivationLedger
from .quant import QuantizedMatrix
from .tape import Batch, backward_graph, forward_graph

METRICS_HEADER = "step,tokens,train_loss,val_loss,lr,grad_norm,orth_err_R,orth_err_P,sv_drift,act_bytes,elapsed_s"

# steps_since_merge sentinel in checkpoints (no merge has happened yet)
_NO_MERGE = 0xFFFFFFFF


def _fmt(v: float) -> str:
    return f"{float(v):.17g}"


def _schedule(cfg: TrainConfig) -> ScheduleConfig:
    return ScheduleConfig(
        base_lr=cfg.base_lr,
        total_steps=cfg.total_steps,
        warmup_steps=cfg.warmup_steps,
        min_lr_ratio=cfg.min_lr_ratio,
        poet_lr_scale=cfg.poet_lr_scale,
        weight_decay=cfg.weight_decay,
        clip_norm=cfg.clip_norm,
        post_merge_clip_start=cfg.post_merge_clip_start,
        post_merge_clip_ramp=cfg.post_merge_clip_ramp,
        post_merge_clip_window=cfg.post_merge_clip_window,
        beta1=cfg.adam_beta1,
        beta2=cfg.adam_beta2,
        eps=cfg.adam_eps,
    )


# -- task data plumbing -------------------------------------------------------


class _RegressionTask:
    """Student regresses onto a fixed random linear teacher."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.teacher = gaussian_matrix(
            cfg.in_dim, cfg.out_dim, 1.0 / np.sqrt(cfg.in_dim),
            Rng.keyed(cfg.seed, "teacher"), dtype=cfg.dtype,
        )

    def train_batch(self, step: int) -> Batch:
        rng = Rng.keyed(self.cfg.seed, "batch", step)
        x = gaussian_matrix(self.cfg.batch_size, self.cfg.in_dim, 1.0, rng, dtype=self.cfg.dtype)
        return Batch(inputs=x, targets=matmul(x, self.teacher))

    def val_set(self) -> list:
        rng = Rng.keyed(self.cfg.seed, "val")
        x = gaussian_matrix(self.cfg.val_examples, self.cfg.in_dim, 1.0, rng, dtype=self.cfg.dtype)
        return [Batch(inputs=x, targets=matmul(x, self.teacher))]

    @property
    def tokens_per_step(self) -> int:
        # examples for the regression task; real tokens for char-lm
        return self.cfg.batch_size


class _CharLmTask:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.corpus = load_corpus(cfg.data_path)

    def train_batch(self, step: int) -> Batch:
        rng = Rng.keyed(self.cfg.seed, "batch", step)
        return sample_batch(self.corpus, self.cfg.batch_size, self.cfg.context_len, rng)

    def val_set(self) -> list:
        return val_batches(self.corpus, self.cfg.batch_size, self.cfg.context_len, self.cfg.val_examples)

    @property
    def tokens_per_step(self) -> int:
        return self.cfg.batch_size * self.cfg.context_len


def _eval_loss(model, batches: list) -> float:
    """Example-weighted mean loss over fixed batches; no ledger effects
    on the training run (validation uses a throwaway ledger)."""
    total = 0.0
    seen = 0
    for b in batches:
        loss, _ = forward_graph(model, b, ActivationLedger())
        count = b.inputs.shape[0]
        total += loss * count
        seen += count
    return total / seen


def _orth_errors(model) -> tuple:
    """Worst per-side ||G^T G - I||_F across the model's layers."""
    err_r = 0.0
    err_p = 0.0
    for layer in model.poet_layers():
        g_r, _ = cnp_forward(skew_from_packed(layer.q_r), layer.neumann_k)
        g_p, _ = cnp_forward(skew_from_packed(layer.q_p), layer.neumann_k)
        err_r = max(err_r, orthogonality_error(g_r))
        err_p = max(err_p, orthogonality_error(g_p))
    return err_r, err_p


# -- checkpoint state ---------------------------------------------------------


def _training_state(model, opt_poet, opt_dense, step, steps_since_merge, tokens, sv_drift) -> dict:
    tensors = {
        "progress/step": np.array([step], dtype=np.uint32),
        "progress/tokens": np.array([tokens], dtype=np.uint32),
        "progress/steps_since_merge": np.array(
            [_NO_MERGE if steps_since_merge is None else steps_since_merge], dtype=np.uint32
        ),
        "progress/sv_drift": np.array([sv_drift], dtype=np.float64),
    }
    for name, p in model.params().items():
        tensors[f"param/{name}"] = p
    for layer in model.poet_layers():
        key = f"layer/{layer.name}"
        if layer.quantized:
            tensors[f"{key}/base_codes"] = layer.base.codes
            tensors[f"{key}/base_scales"] = layer.base.scales
        else:
            tensors[f"{key}/base"] = layer.base
        tensors[f"{key}/perm_in"] = layer.perm_in.forward.astype(np.uint32)
        tensors[f"{key}/perm_out"] = layer.perm_out.forward.astype(np.uint32)
        tensors[f"{key}/merge_count"] = np.array([layer.merge_count], dtype=np.uint32)
    for tag, state in (("poet", opt_poet), ("dense", opt_dense)):
        if state is None:
            continue
        tensors[f"opt/{tag}/t"] = np.array([state.t], dtype=np.uint32)
        for name, arr in state.m.items():
            tensors[f"opt/{tag}/m/{name}"] = arr
        for name, arr in state.v.items():
            tensors[f"opt/{tag}/v/{name}"] = arr
    return tensors


def _restore_array(dst: np.ndarray, name: str, tensors: dict) -> None:
    if name not in tensors:
        raise CheckpointError(f"checkpoint missing tensor {name!r}")
    stored = tensors[name]
    if stored.shape != dst.shape or stored.dtype != dst.dtype:
        raise CheckpointError(
            f"tensor {name!r} mismatch: stored {stored.dtype}{stored.shape}, "
            f"expected {dst.dtype}{dst.shape}"
        )
    dst[...] = stored


def _scalar(tensors: dict, name: str) -> int:
    if name not in tensors:
        raise CheckpointError(f"checkpoint missing tensor {name!r}")
    return int(tensors[name][0])


def _restore_training_state(model, opt_poet, opt_dense, tensors: dict):
    for name, p in model.params().items():
        _restore_array(p, f"param/{name}", tensors)
    for layer in model.poet_layers():
        key = f"layer/{layer.name}"
        if layer.quantized:
            codes = tensors.get(f"{key}/base_codes")
            scales = tensors.get(f"{key}/base_scales")
            if codes is None or scales is None:
                raise CheckpointError(f"checkpoint missing quantized base for {layer.name}")
            layer.base = QuantizedMatrix(codes, scales, float_dtype=layer.dtype)
        else:
            stored = np.empty_like(layer.base)
            _restore_array(stored, f"{key}/base", tensors)
            layer.base = stored
        if f"{key}/perm_in" not in tensors or f"{key}/perm_out" not in tensors:
            raise CheckpointError(f"checkpoint missing permutations for {layer.name}")
        layer.merge_count = _scalar(tensors, f"{key}/merge_count")
        # installs both permutations and refreshes premerged off the new base
        layer.set_permutations(
            PermutationMap.from_forward(tensors[f"{key}/perm_in"].astype(np.int32)),
            PermutationMap.from_forward(tensors[f"{key}/perm_out"].astype(np.int32)),
        )
    for tag, state in (("poet", opt_poet), ("dense", opt_dense)):
        if state is None:
            continue
        state.t = _scalar(tensors, f"opt/{tag}/t")
        for name, arr in state.m.items():
            _restore_array(arr, f"opt/{tag}/m/{name}", tensors)
        for name, arr in state.v.items():
            _restore_array(arr, f"opt/{tag}/v/{name}", tensors)
    raw = _scalar(tensors, "progress/steps_since_merge")
    steps_since_merge = None if raw == _NO_MERGE else raw
    sv_drift = float(tensors["progress/sv_drift"][0]) if "progress/sv_drift" in tensors else 0.0
    return _scalar(tensors, "progress/step"), steps_since_merge, _scalar(tensors, "progress/tokens"), sv_drift


# -- training -----------------------------------------------------------------


def run_train(cfg: TrainConfig) -> dict:
    if cfg.task not in ("regression", "char-lm"):
        raise ConfigError(f"run_train cannot handle task {cfg.task!r}")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    task = _RegressionTask(cfg) if cfg.task == "regression" else _CharLmTask(cfg)
    model = build_model(cfg)
    sched = _schedule(cfg)
    ledger = ActivationLedger()
    model.register_memory(ledger)

    groups = model.param_groups()
    params = model.params()
    poet_params = {k: params[k] for k in groups["poet"]}
    dense_params = {k: params[k] for k in groups["dense"]}
    opt_poet = adamw_init(poet_params) if poet_params else None
    opt_dense = adamw_init(dense_params) if dense_params else None
    for opt in (opt_poet, opt_dense):
        if opt is not None:
            ledger.add_optimizer_bytes(opt.nbytes())

    step = 0
    steps_since_merge = None
    tokens = 0
    sv_drift = 0.0  # worst per-merge relative drift seen so far (spectrum_audit runs)
    if cfg.resume:
        tensors, stored_cfg = load_checkpoint(cfg.resume)
        check_resume_compatible(stored_cfg, cfg)
        step, steps_since_merge, tokens, sv_drift = _restore_training_state(
            model, opt_poet, opt_dense, tensors
        )
        print(f"resumed from {cfg.resume} at step {step}")

    val_set = task.val_set()
    initial_val = _eval_loss(model, val_set)
    final_val = initial_val
    train_loss = float("nan")
    merges = []
    t0 = time.perf_counter()

    metrics_path = out_dir / "metrics.csv"
    with metrics_path.open("w") as mf:
        mf.write(METRICS_HEADER + "\n")
        mf.flush()
        while step < cfg.total_steps:
            batch = task.train_batch(step)
            loss, tape = forward_graph(model, batch, ledger)
            if not np.isfinite(loss):
                raise NumericsError(f"non-finite training loss at step {step}")
            train_loss = loss
            act_bytes = ledger.saved_activation_bytes
            grads = backward_graph(tape)

            lr_dense = lr_at(step, sched)
            threshold = clip_threshold_at(step, steps_since_merge, sched)
            grad_norm = global_clip(grads, threshold)
            if opt_poet is not None:
                adamw_step(poet_params, {k: grads[k] for k in poet_params},
                           opt_poet, lr_at(step, sched, poet=True), sched)
            if opt_dense is not None:
                adamw_step(dense_params, {k: grads[k] for k in dense_params},
                           opt_dense, lr_dense, sched)

            step += 1
            tokens += task.tokens_per_step
            if steps_since_merge is not None:
                steps_since_merge += 1

            if cfg.optimizer == "poet" and step % cfg.merge_gap == 0 and step < cfg.total_steps:
                for idx, layer in enumerate(model.poet_layers()):
                    audit = layer.merge_and_reinit(
                        Rng.keyed(cfg.seed, "merge", step, idx),
                        compute_sv_drift=cfg.spectrum_audit,
                    )
                    merges.append({
                        "step": step,
                        "layer": layer.name,
                        "merge_count": audit.merge_index,
                        "orth_err_r": audit.orth_err_r,
                        "orth_err_p": audit.orth_err_p,
                        "sv_drift": audit.sv_drift,
                    })
                    print(
                        f"merge step={step} layer={layer.name} "
                        f"orth_err_R={audit.orth_err_r:.3e} orth_err_P={audit.orth_err_p:.3e}"
                        + (f" sv_drift={audit.sv_drift:.3e}" if cfg.spectrum_audit else "")
                    )
                    if cfg.spectrum_audit:
                        sv_drift = max(sv_drift, audit.sv_drift)
                if opt_poet is not None:
                    # fresh packed params after a merge get fresh moments
                    opt_poet.reset()
                steps_since_merge = 0

            if step % cfg.log_every == 0 or step == cfg.total_steps:
                final_val = _eval_loss(model, val_set)
                if not np.isfinite(final_val):
                    raise NumericsError(f"non-finite validation loss at step {step}")
                err_r, err_p = _orth_errors(model)
                elapsed = time.perf_counter() - t0
                mf.write(
                    f"{step},{tokens},{_fmt(train_loss)},{_fmt(final_val)},{_fmt(lr_dense)},"
                    f"{_fmt(grad_norm)},{_fmt(err_r)},{_fmt(err_p)},{_fmt(sv_drift)},"
                    f"{act_bytes},{elapsed:.3f}\n"
                )
                mf.flush()
                print(
                    f"step {step}/{cfg.total_steps} train_loss={train_loss:.6f} "
                    f"val_loss={final_val:.6f} lr={lr_dense:.3e} grad_norm={grad_norm:.3e}"
                )

            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step < cfg.total_steps:
                state = _training_state(model, opt_poet, opt_dense, step, steps_since_merge, tokens, sv_drift)
                save_checkpoint(str(out_dir / f"step{step:06d}.ckpt"), state, config_to_text(cfg))

    final_path = out_dir / "final.ckpt"
    state = _training_state(model, opt_poet, opt_dense, step, steps_since_merge, tokens, sv_drift)
    save_checkpoint(str(final_path), state, config_to_text(cfg))

    summary = {
        "task": cfg.task,
        "steps": step,
        "tokens": tokens,
        "initial_val_loss": initial_val,
        "final_val_loss": final_val,
        "final_train_loss": train_loss,
        "metrics_path": str(metrics_path),
        "checkpoint_path": str(final_path),
        "merges": merges,
        "memory": ledger.report(),
        "elapsed_s": time.perf_counter() - t0,
    }
    if cfg.task == "char-lm":
        summary["unigram_entropy"] = unigram_entropy(task.corpus.data)
    print(
        f"done: task={cfg.task} steps={step} initial_val={initial_val:.6f} "
        f"final_val={final_val:.6f}"
    )
    return summary


# -- update coverage simulation -----------------------------------------------


def run_coverage(cfg: TrainConfig) -> dict:
    """Count, per weight entry, how many updates the rotation pattern
    delivers over the run.

    Block mode: per step, fresh input/output permutations group rows and
    columns into blocks; the R-side multiply touches every row of its
    blocks and the P-side multiply every column, and each side counts as
    one update.  Fully stochastic mode instead samples a fraction of
    rows and columns per step (the fraction reading of the b=1/8
    budget) and touches only those.
    """
    dim = cfg.coverage_dim
    counts = np.zeros((dim, dim), dtype=np.int64)
    for step in range(cfg.coverage_steps):
        rng = Rng.keyed(cfg.seed, "coverage", step)
        if cfg.coverage_mode == "block":
            row_perm = sample_permutation(dim, rng)
            col_perm = sample_permutation(dim, rng)
            b = cfg.block_size
            for blk in range(dim // b):
                rows = row_perm.forward[blk * b:(blk + 1) * b]
                counts[rows, :] += 1
            for blk in range(dim // b):
                cols = col_perm.forward[blk * b:(blk + 1) * b]
                counts[:, cols] += 1
        else:
            k = int(dim * cfg.coverage_fraction)
            rows = rng.permutation(dim)[:k]
            cols = rng.permutation(dim)[:k]
            counts[rows, :] += 1
            counts[:, cols] += 1

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "coverage.csv"
    with csv_path.open("w") as f:
        f.write("row,col,count\n")
        for i in range(dim):
            for j in range(dim):
                f.write(f"{i},{j},{counts[i, j]}\n")

    summary = {
        "mode": cfg.coverage_mode,
        "dim": dim,
        "steps": cfg.coverage_steps,
        "block_size": cfg.block_size,
        "fraction": cfg.coverage_fraction,
        "min": int(counts.min()) if counts.size else 0,
        "max": int(counts.max()) if counts.size else 0,
        "mean": float(counts.mean()) if counts.size else 0.0,
        "variance": float(counts.var()) if counts.size else 0.0,
        "counts": counts,
        "csv_path": str(csv_path),
    }
    lines = [
        f"coverage mode={summary['mode']} dim={dim} steps={summary['steps']}",
        f"updates per entry: min={summary['min']} max={summary['max']} "
        f"mean={summary['mean']:.3f} variance={summary['variance']:.6f}",
    ]
    if cfg.coverage_mode == "row-col":
        lines.append(
            f"fully stochastic simulation: {int(dim * cfg.coverage_fraction)} of {dim} "
            f"rows and columns sampled per step (fraction reading of the 1/8 budget)"
        )
    (out_dir / "coverage_summary.txt").write_text("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    return summary


# -- singular-value drift audit -------------------------------------------------


def run_spectrum_audit(cfg: TrainConfig) -> dict:
    """Train one square layer briefly between merges and track how far
    the base weight's singular values move, per merge and cumulatively
    against the starting spectrum.  Merges use either the same truncated
    factors the forward pass uses or the exact Cayley transform."""
    dim = cfg.audit_dim
    dtype = cfg.dtype
    layer = init_layer(
        dim, dim, cfg.block_size, Rng.keyed(cfg.seed, "audit", "init"),
        name="audit", variant=cfg.variant, neumann_k=cfg.neumann_k, dtype=dtype,
    )
    teacher = gaussian_matrix(dim, dim, 1.0 / np.sqrt(dim), Rng.keyed(cfg.seed, "audit", "teacher"), dtype=dtype)
    x = gaussian_matrix(cfg.batch_size, dim, 1.0, Rng.keyed(cfg.seed, "audit", "input"), dtype=dtype)
    target = matmul(x, teacher)

    sched = _schedule(cfg)
    params = {"q_r": layer.q_r.packed, "q_p": layer.q_p.packed}
    state = adamw_init(params)

    sv_orig = svd_singular_values(layer.base)
    sv_prev = sv_orig
    tiny = np.finfo(np.float64).tiny
    rows = []
    exact = cfg.audit_mode == "cayley"
    for merge_idx in range(cfg.audit_merges):
        loss = float("nan")
        for _ in range(cfg.audit_steps):
            z, cache = layer.forward(x)
            resid = z - target
            loss = float(np.mean(resid * resid))
            dz = ((2.0 / z.size) * resid).astype(dtype)
            g = layer.backward(cache, dz)
            adamw_step(params, {"q_r": g.q_r, "q_p": g.q_p}, state, cfg.audit_lr, sched)
        q_norm = 0.0
        for packed in (layer.q_r, layer.q_p):
            for block in skew_from_packed(packed):
                q_norm = max(q_norm, spectral_norm(block))
        audit = layer.merge_and_reinit(
            Rng.keyed(cfg.seed, "audit", "merge", merge_idx), use_exact_cayley=exact
        )
        sv_new = svd_singular_values(layer.base)
        per_merge = float(np.max(np.abs(sv_new - sv_prev) / np.maximum(sv_prev, tiny)))
        cumulative = float(np.max(np.abs(sv_new - sv_orig) / np.maximum(sv_orig, tiny)))
        sv_prev = sv_new
        rows.append({
            "merge": merge_idx + 1,
            "loss": loss,
            "max_q_norm": q_norm,
            "orth_err_r": audit.orth_err_r,
            "orth_err_p": audit.orth_err_p,
            "per_merge_drift": per_merge,
            "cumulative_drift": cumulative,
        })
        print(
            f"merge {merge_idx + 1}/{cfg.audit_merges} mode={cfg.audit_mode} "
            f"loss={loss:.6f} max|Q|={q_norm:.4f} per_merge_drift={per_merge:.3e} "
            f"cumulative_drift={cumulative:.3e}"
        )
        state.reset()

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "spectrum_audit.csv"
    with report_path.open("w") as f:
        f.write("merge,loss,max_q_norm,orth_err_R,orth_err_P,per_merge_drift,cumulative_drift\n")
        for r in rows:
            f.write(
                f"{r['merge']},{_fmt(r['loss'])},{_fmt(r['max_q_norm'])},"
                f"{_fmt(r['orth_err_r'])},{_fmt(r['orth_err_p'])},"
                f"{_fmt(r['per_merge_drift'])},{_fmt(r['cumulative_drift'])}\n"
            )
    return {
        "mode": cfg.audit_mode,
        "rows": rows,
        "max_per_merge_drift": max((r["per_merge_drift"] for r in rows), default=0.0),
        "cumulative_drift": rows[-1]["cumulative_drift"] if rows else 0.0,
        "report_path": str(report_path),
    }


# -- strategy profiling ---------------------------------------------------------


def run_profile(cfg: TrainConfig) -> dict:
    """One full forward/backward per strategy: the weight-centric
    reference that materializes R·W·P, the two input-centric variants,
    and a plain dense layer.  Reports matmul and allocation counters,
    saved-activation bytes, and median wall-clock over the configured
    repetitions (timings are informational, never gated)."""
    dtype = cfg.dtype
    batch, m, n = cfg.profile_batch, cfg.profile_m, cfg.profile_n
    x = gaussian_matrix(batch, m, 1.0, Rng.keyed(cfg.seed, "profile", "x"), dtype=dtype)
    dz = gaussian_matrix(batch, n, 1.0, Rng.keyed(cfg.seed, "profile", "dz"), dtype=dtype)

    def make_layer(variant: str):
        layer = init_layer(
            m, n, cfg.block_size, Rng.keyed(cfg.seed, "profile", "layer"),
            name=f"profile-{variant}", variant=variant, neumann_k=cfg.neumann_k, dtype=dtype,
        )
        # off-identity rotations so the factor work is representative
        pk = Rng.keyed(cfg.seed, "profile", "packed")
        layer.q_r.packed[...] = (0.01 * pk.normal(layer.q_r.packed.shape)).astype(dtype)
        layer.q_p.packed[...] = (0.01 * pk.normal(layer.q_p.packed.shape)).astype(dtype)
        return layer

    fast_layer = make_layer("fast")
    mem_layer = make_layer("mem")
    dense_w = gaussian_matrix(m, n, 1.0 / np.sqrt(m), Rng.keyed(cfg.seed, "profile", "dense"), dtype=dtype)

    def dense_step(ledger):
        z = matmul(x, dense_w)
        matmul_atb(x, dz)
        matmul_abt(dz, dense_w)
        return z

    def poet_step(layer):
        def step(ledger):
            z, cache = layer.forward(x, ledger=ledger)
            layer.backward(cache, dz)
            ledger.release_activations()
            return z
        return step

    def weight_centric_step(ledger):
        layer = fast_layer
        g_r, _ = cnp_forward(skew_from_packed(layer.q_r), layer.neumann_k)
        g_p, _ = cnp_forward(skew_from_packed(layer.q_p), layer.neumann_k)
        r_dense = permute_rows(permute_cols(assemble_dense(BlockDiagonalFactor(g_r)), layer.perm_in, "forward"),
                               layer.perm_in, "inverse")
        p_dense = permute_rows(permute_cols(assemble_dense(BlockDiagonalFactor(g_p)), layer.perm_out, "forward"),
                               layer.perm_out, "inverse")
        w_rp = matmul(r_dense, layer.base)
        COUNTERS.weight_intermediate_allocs += 1
        w_eff = matmul(w_rp, p_dense)
        COUNTERS.weight_intermediate_allocs += 1
        # both m x n products stay live for the backward
        ledger.save_activation("weight-centric", w_rp.nbytes + w_eff.nbytes)
        z = matmul(x, w_eff)
        dw_eff = matmul_atb(x, dz)
        COUNTERS.weight_intermediate_allocs += 1
        matmul_abt(dz, w_eff)
        dw_rp = matmul_abt(dw_eff, p_dense)
        COUNTERS.weight_intermediate_allocs += 1
        matmul_abt(dw_rp, layer.base)
        matmul_atb(w_rp, dw_eff)
        ledger.release_activations()
        return z

    paths = (
        ("weight-centric", weight_centric_step),
        ("poet-fast", poet_step(fast_layer)),
        ("poet-mem", poet_step(mem_layer)),
        ("dense", dense_step),
    )
    results = []
    for name, fn in paths:
        for _ in range(cfg.profile_warmup):
            fn(ActivationLedger())
        counted_ledger = ActivationLedger()
        before = COUNTERS.snapshot()
        fn(counted_ledger)
        delta = COUNTERS.delta_since(before)
        times = []
        for _ in range(cfg.profile_reps):
            led = ActivationLedger()
            start = time.perf_counter()
            fn(led)
            times.append(time.perf_counter() - start)
        results.append({
            "path": name,
            "dense_matmuls": delta.dense_matmuls,
            "block_matmuls": delta.block_matmuls,
            "total_matmuls": delta.dense_matmuls + delta.block_matmuls,
            "perm_matrix_allocs": delta.perm_matrix_allocs,
            "dense_factor_allocs": delta.dense_factor_allocs,
            "weight_intermediate_allocs": delta.weight_intermediate_allocs,
            "saved_activation_bytes": counted_ledger.saved_peak,
            "median_ms": statistics.median(times) * 1e3,
        })

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = (
        f"{'path':16s} {'dense_mm':>8s} {'block_mm':>8s} {'factor_allocs':>13s} "
        f"{'weight_allocs':>13s} {'saved_bytes':>11s} {'median_ms':>10s}"
    )
    lines = [
        f"profile batch={batch} m={m} n={n} b={cfg.block_size} dtype={np.dtype(dtype).name} "
        f"reps={cfg.profile_reps} (timings informational only)",
        header,
    ]
    for r in results:
        lines.append(
            f"{r['path']:16s} {r['dense_matmuls']:8d} {r['block_matmuls']:8d} "
            f"{r['dense_factor_allocs']:13d} {r['weight_intermediate_allocs']:13d} "
            f"{r['saved_activation_bytes']:11d} {r['median_ms']:10.3f}"
        )
    (out_dir / "profile.txt").write_text("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    return {"batch": batch, "m": m, "n": n, "paths": results}
