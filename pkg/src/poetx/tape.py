"""Reverse-mode tape over a fixed op vocabulary.

``forward_graph`` executes a model's stage list on one batch, recording
one node per op in execution order; ``backward_graph`` replays the
nodes in reverse, returning a gradient per trainable parameter name and
consuming the tape (a second replay raises).

Memory convention, which the byte-accounting tests are written against:
the chain activations (each node's output, input to the next node) are
alive as ordinary graph references and are not charged to the ledger.
The ``saved_activations`` category counts only tensors a node stows
*beyond* its input/output refs because its backward needs them.  Under
this convention the fast layer variant charges its mm2 output
(batch x n) per layer and nothing else in the op set charges anything:
the nonlinearity differentiates through its own output, the losses
recompute their residuals/probabilities from the logits ref, and the
embedding keeps only integer index refs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, StateError
from .layer import PoetLinearLayer
from .linalg import matmul, matmul_abt, matmul_atb
from .profiler import ActivationLedger


# -- stage descriptors (models are lists of these) ---------------------------


@dataclass
class PoetOp:
    layer: PoetLinearLayer


@dataclass
class DenseOp:
    name: str
    weight: np.ndarray


@dataclass
class TanhOp:
    pass


@dataclass
class EmbedOp:
    name: str
    table: np.ndarray  # (vocab, embed_dim)


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray


@dataclass
class TapeNode:
    kind: str
    input_id: int  # producing node id, -1 for the batch input
    payload: dict = field(default_factory=dict)


@dataclass
class Tape:
    nodes: list
    values: list  # node outputs, values[i] produced by nodes[i]
    loss: float
    batch: Batch
    ledger: ActivationLedger
    consumed: bool = False


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=1, keepdims=True)


def forward_graph(model, batch: Batch, ledger: ActivationLedger | None = None):
    """Run the model on one batch, return (loss, tape)."""
    if ledger is None:
        ledger = ActivationLedger()
    nodes: list[TapeNode] = []
    values: list[np.ndarray] = []
    x = batch.inputs
    prev = -1
    for op in model.stages:
        if isinstance(op, EmbedOp):
            if x.ndim != 2 or not np.issubdtype(x.dtype, np.integer):
                raise ShapeError(f"embedding lookup wants (batch, context) ints, got {x.shape} {x.dtype}")
            batch_size, ctx = x.shape
            gathered = op.table[x.reshape(-1), :]
            out = np.ascontiguousarray(gathered.reshape(batch_size, ctx * op.table.shape[1]))
            nodes.append(TapeNode("embedding-lookup", prev, {"op": op, "tokens": x}))
        elif isinstance(op, PoetOp):
            out, cache = op.layer.forward(x, ledger=ledger)
            nodes.append(TapeNode("poet-linear", prev, {"op": op, "cache": cache}))
        elif isinstance(op, DenseOp):
            out = matmul(x, op.weight)
            nodes.append(TapeNode("dense-linear", prev, {"op": op}))
        elif isinstance(op, TanhOp):
            out = np.tanh(x)
            nodes.append(TapeNode("elementwise-nonlinearity", prev, {}))
        else:
            raise ShapeError(f"unknown stage {type(op).__name__}")
        values.append(out)
        prev = len(nodes) - 1
        x = out
    # terminal loss node
    if model.loss_kind == "squared-error":
        resid = x - batch.targets
        loss = float(np.mean(resid * resid))
        nodes.append(TapeNode("squared-error", prev, {}))
    elif model.loss_kind == "softmax-cross-entropy":
        logits = x
        t = batch.targets
        if t.shape != (logits.shape[0],):
            raise ShapeError(f"targets shape {t.shape} does not match batch {logits.shape[0]}")
        shifted = logits - np.max(logits, axis=1, keepdims=True)
        lse = np.log(np.sum(np.exp(shifted), axis=1))
        loss = float(np.mean(lse - shifted[np.arange(logits.shape[0]), t]))
        nodes.append(TapeNode("softmax-cross-entropy", prev, {}))
    else:
        raise ShapeError(f"unknown loss kind {model.loss_kind!r}")
    values.append(None)  # loss node produces the scalar held in tape.loss
    return loss, Tape(nodes=nodes, values=values, loss=loss, batch=batch, ledger=ledger)


def backward_graph(tape: Tape) -> dict:
    """Reverse replay; returns {param name: gradient array}."""
    if tape.consumed:
        raise StateError("tape already consumed by a previous backward")
    tape.consumed = True
    grads: dict[str, np.ndarray] = {}

    def value_in(node: TapeNode) -> np.ndarray:
        return tape.batch.inputs if node.input_id == -1 else tape.values[node.input_id]

    # seed from the loss node
    loss_node = tape.nodes[-1]
    pred = value_in(loss_node)
    if loss_node.kind == "squared-error":
        d = (2.0 / pred.size) * (pred - tape.batch.targets)
        d = d.astype(pred.dtype)
    else:  # softmax-cross-entropy: recompute probabilities from the logits ref
        probs = _softmax(pred)
        t = tape.batch.targets
        probs[np.arange(pred.shape[0]), t] -= 1.0
        d = (probs / pred.shape[0]).astype(pred.dtype)

    for idx in range(len(tape.nodes) - 2, -1, -1):
        node = tape.nodes[idx]
        x = value_in(node)
        if node.kind == "poet-linear":
            layer_grads = node.payload["op"].layer.backward(node.payload["cache"], d)
            name = node.payload["op"].layer.name
            grads[f"{name}.q_r"] = layer_grads.q_r
            grads[f"{name}.q_p"] = layer_grads.q_p
            d = layer_grads.x
        elif node.kind == "dense-linear":
            op = node.payload["op"]
            grads[op.name] = matmul_atb(x, d)
            d = matmul_abt(d, op.weight)
        elif node.kind == "elementwise-nonlinearity":
            y = tape.values[idx]  # tanh differentiates through its output
            d = d * (1.0 - y * y)
        elif node.kind == "embedding-lookup":
            op = node.payload["op"]
            tokens = node.payload["tokens"]
            emb_dim = op.table.shape[1]
            dtable = np.zeros_like(op.table)
            np.add.at(dtable, tokens.reshape(-1), d.reshape(-1, emb_dim))
            grads[op.name] = dtable
            d = None  # integer inputs end the chain
        else:
            raise ShapeError(f"unknown node kind {node.kind!r}")
    tape.ledger.release_activations()
    return grads


def memory_report(ledger: ActivationLedger) -> dict:
    """Ledger totals plus the per-layer activation breakdown."""
    return ledger.report()
