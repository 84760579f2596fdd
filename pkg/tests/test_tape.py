"""Graph execution and reverse replay over the op vocabulary."""

import numpy as np
import pytest

from poetx.config import TrainConfig
from poetx.errors import ShapeError, StateError
from poetx.linalg import Rng, matmul
from poetx.models import build_char_lm, build_model, build_regression_model
from poetx.profiler import COUNTERS, ActivationLedger
from poetx.tape import Batch, backward_graph, forward_graph


def _reg_cfg(**over):
    base = dict(
        task="regression", precision=64, in_dim=4, hidden_dim=8, out_dim=4,
        depth=2, block_size=2, nonlinearity="tanh", seed=7, batch_size=5,
    )
    base.update(over)
    return TrainConfig(**base)


def _lm_cfg(**over):
    base = dict(
        task="char-lm", precision=64, embed_dim=4, context_len=2, hidden_dim=8,
        depth=2, block_size=2, nonlinearity="tanh", seed=7, batch_size=3,
    )
    base.update(over)
    return TrainConfig(**base)


def _reg_batch(cfg, seed=11):
    rng = Rng.keyed(seed, "tape", "reg")
    x = rng.normal((cfg.batch_size, cfg.in_dim)).astype(cfg.dtype)
    t = rng.normal((cfg.batch_size, cfg.out_dim)).astype(cfg.dtype)
    return Batch(inputs=x, targets=t)


def _lm_batch(cfg, seed=11):
    rng = Rng.keyed(seed, "tape", "lm")
    tokens = rng.integers(0, 256, size=(cfg.batch_size, cfg.context_len)).astype(np.int64)
    targets = rng.integers(0, 256, size=cfg.batch_size).astype(np.int64)
    return Batch(inputs=tokens, targets=targets)


# -- node structure ------------------------------------------------------------


def test_regression_node_kinds_in_order():
    model = build_regression_model(_reg_cfg())
    loss, tape = forward_graph(model, _reg_batch(_reg_cfg()))
    kinds = [n.kind for n in tape.nodes]
    assert kinds == ["poet-linear", "elementwise-nonlinearity", "poet-linear", "squared-error"]
    assert np.isfinite(loss)


def test_char_lm_node_kinds_in_order():
    model = build_char_lm(_lm_cfg())
    loss, tape = forward_graph(model, _lm_batch(_lm_cfg()))
    kinds = [n.kind for n in tape.nodes]
    assert kinds == [
        "embedding-lookup", "poet-linear", "elementwise-nonlinearity",
        "poet-linear", "softmax-cross-entropy",
    ]
    assert np.isfinite(loss)


def test_dense_baseline_node_kinds():
    model = build_regression_model(_reg_cfg(optimizer="dense-adamw"))
    _, tape = forward_graph(model, _reg_batch(_reg_cfg()))
    kinds = [n.kind for n in tape.nodes]
    assert kinds == ["dense-linear", "elementwise-nonlinearity", "dense-linear", "squared-error"]


def test_embedding_wants_integer_inputs():
    cfg = _lm_cfg()
    model = build_char_lm(cfg)
    bad = Batch(
        inputs=np.zeros((cfg.batch_size, cfg.context_len), dtype=np.float64),
        targets=np.zeros(cfg.batch_size, dtype=np.int64),
    )
    with pytest.raises(ShapeError):
        forward_graph(model, bad)


# -- loss values ----------------------------------------------------------------


def test_squared_error_matches_direct_computation():
    cfg = _reg_cfg(optimizer="dense-adamw", nonlinearity="none")
    model = build_regression_model(cfg)
    batch = _reg_batch(cfg)
    loss, _ = forward_graph(model, batch)
    w0 = model.stages[0].weight
    w1 = model.stages[1].weight
    pred = matmul(matmul(batch.inputs, w0), w1)
    assert loss == float(np.mean((pred - batch.targets) ** 2))


def test_cross_entropy_matches_log_softmax_oracle():
    cfg = _lm_cfg()
    model = build_char_lm(cfg)
    batch = _lm_batch(cfg)
    loss, tape = forward_graph(model, batch)
    logits = tape.values[-2]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    expect = -logp[np.arange(len(batch.targets)), batch.targets].mean()
    assert loss == pytest.approx(float(expect), rel=1e-12)


# -- gradients -------------------------------------------------------------------


def _fd_grad(model, batch, name, idx, h=1e-6):
    p = model.params()[name]
    flat = p.reshape(-1)
    keep = flat[idx]
    flat[idx] = keep + h
    up, _ = forward_graph(model, batch)
    flat[idx] = keep - h
    dn, _ = forward_graph(model, batch)
    flat[idx] = keep
    return (up - dn) / (2 * h)


def _check_model_gradient(model, batch, sample=None, rel=1e-6):
    loss, tape = forward_graph(model, batch)
    grads = backward_graph(tape)
    coords = []
    for name, p in model.params().items():
        for idx in range(p.size):
            coords.append((name, idx))
    if sample is not None:
        rng = np.random.Generator(np.random.Philox(key=np.array([5, 0], dtype=np.uint64)))
        picks = rng.permutation(len(coords))[:sample]
        coords = [coords[i] for i in picks]
    worst = 0.0
    for name, idx in coords:
        fd = _fd_grad(model, batch, name, idx)
        an = grads[name].reshape(-1)[idx]
        denom = max(abs(fd), abs(an), 1e-8)
        worst = max(worst, abs(an - fd) / denom)
    assert worst <= rel, worst


def test_whole_regression_model_gradient_matches_fd():
    cfg = _reg_cfg()
    model = build_regression_model(cfg)
    # move rotations off zero so the factor gradients are exercised
    for layer in model.poet_layers():
        rng = Rng.keyed(3, "offzero", layer.name)
        layer.q_r.packed[...] = 0.04 * rng.normal(layer.q_r.packed.shape)
        layer.q_p.packed[...] = 0.04 * rng.normal(layer.q_p.packed.shape)
    _check_model_gradient(model, _reg_batch(cfg))


def test_whole_char_lm_gradient_matches_fd_sampled():
    cfg = _lm_cfg()
    model = build_char_lm(cfg)
    for layer in model.poet_layers():
        rng = Rng.keyed(4, "offzero", layer.name)
        layer.q_r.packed[...] = 0.04 * rng.normal(layer.q_r.packed.shape)
        layer.q_p.packed[...] = 0.04 * rng.normal(layer.q_p.packed.shape)
    _check_model_gradient(model, _lm_batch(cfg), sample=60)


def test_dense_baseline_gradient_matches_fd():
    cfg = _reg_cfg(optimizer="dense-adamw")
    model = build_regression_model(cfg)
    _check_model_gradient(model, _reg_batch(cfg), sample=40)


def test_embedding_gradient_is_scatter_sum():
    cfg = _lm_cfg(nonlinearity="none", depth=1)
    model = build_char_lm(cfg)
    batch = _lm_batch(cfg)
    # duplicate tokens in one context must accumulate, not overwrite
    batch.inputs[0, :] = batch.inputs[0, 0]
    _, tape = forward_graph(model, batch)
    grads = backward_graph(tape)
    # replay is deterministic
    _, tape2 = forward_graph(model, batch)
    grads2 = backward_graph(tape2)
    assert np.array_equal(grads["embed"], grads2["embed"])
    # FD on a row that appears twice in one context: scatter must sum both hits
    flat_idx = int(batch.inputs[0, 0]) * cfg.embed_dim
    fd = _fd_grad(model, batch, "embed", flat_idx)
    an = grads["embed"].reshape(-1)[flat_idx]
    assert an == pytest.approx(fd, rel=1e-6, abs=1e-10)
    # rows never looked up get exactly zero gradient
    seen = set(int(t) for t in batch.inputs.reshape(-1))
    unseen = next(i for i in range(256) if i not in seen)
    assert np.all(grads["embed"][unseen] == 0.0)


# -- replay discipline ------------------------------------------------------------


def test_backward_twice_raises():
    cfg = _reg_cfg()
    model = build_regression_model(cfg)
    _, tape = forward_graph(model, _reg_batch(cfg))
    backward_graph(tape)
    with pytest.raises(StateError):
        backward_graph(tape)


def test_gradient_keys_cover_exactly_the_trainables():
    cfg = _lm_cfg()
    model = build_char_lm(cfg)
    _, tape = forward_graph(model, _lm_batch(cfg))
    grads = backward_graph(tape)
    assert set(grads) == set(model.params())
    for name, p in model.params().items():
        assert grads[name].shape == p.shape
        assert grads[name].dtype == p.dtype


# -- memory accounting -------------------------------------------------------------


def test_saved_activation_bytes_per_layer_and_model_wide():
    cfg32 = _reg_cfg(precision=32, in_dim=16, hidden_dim=32, out_dim=16, batch_size=8)
    fast = build_model(cfg32)
    mem = build_model(TrainConfig(**{**cfg32.__dict__, "variant": "mem"}))
    batch = Batch(
        inputs=Rng.keyed(1, "mem").normal((8, 16)).astype(np.float32),
        targets=Rng.keyed(2, "mem").normal((8, 16)).astype(np.float32),
    )
    led_fast = ActivationLedger()
    led_mem = ActivationLedger()
    _, tape_f = forward_graph(fast, batch, led_fast)
    _, tape_m = forward_graph(mem, batch, led_mem)
    elt = 4
    assert led_fast.saved_by_layer == {"layer0": 8 * 32 * elt, "layer1": 8 * 16 * elt}
    assert led_mem.saved_by_layer == {}
    delta = led_fast.saved_activation_bytes - led_mem.saved_activation_bytes
    assert delta == 8 * (32 + 16) * elt
    # released after backward
    backward_graph(tape_f)
    backward_graph(tape_m)
    assert led_fast.saved_activation_bytes == 0
    assert led_fast.saved_peak == 8 * (32 + 16) * elt


def test_dense_matmul_count_for_one_training_step():
    cfg = _reg_cfg()
    model = build_regression_model(cfg)
    batch = _reg_batch(cfg)
    before = COUNTERS.snapshot()
    _, tape = forward_graph(model, batch)
    backward_graph(tape)
    delta = COUNTERS.delta_since(before)
    # fast layers: one dense product forward, one adjoint backward, per layer
    assert delta.dense_matmuls == 2 * 2
    assert delta.perm_matrix_allocs == 0
    assert delta.dense_factor_allocs == 0
    assert delta.weight_intermediate_allocs == 0


def test_mem_variant_adds_one_dense_recompute_per_layer():
    cfg = _reg_cfg(variant="mem")
    model = build_regression_model(cfg)
    batch = _reg_batch(cfg)
    before = COUNTERS.snapshot()
    _, tape = forward_graph(model, batch)
    backward_graph(tape)
    delta = COUNTERS.delta_since(before)
    assert delta.dense_matmuls == 3 * 2


def test_fast_and_mem_gradients_bitwise_equal():
    cfg = _reg_cfg(precision=32)
    fast = build_model(cfg)
    mem = build_model(TrainConfig(**{**cfg.__dict__, "variant": "mem"}))
    batch = _reg_batch(cfg, seed=21)
    batch = Batch(inputs=batch.inputs.astype(np.float32), targets=batch.targets.astype(np.float32))
    for m in (fast, mem):
        for layer in m.poet_layers():
            rng = Rng.keyed(9, "bitwise", layer.name)
            layer.q_r.packed[...] = (0.03 * rng.normal(layer.q_r.packed.shape)).astype(np.float32)
            layer.q_p.packed[...] = (0.03 * rng.normal(layer.q_p.packed.shape)).astype(np.float32)
    lf, tf = forward_graph(fast, batch)
    lm, tm = forward_graph(mem, batch)
    assert lf == lm
    gf = backward_graph(tf)
    gm = backward_graph(tm)
    for name in gf:
        assert np.array_equal(gf[name], gm[name]), name
