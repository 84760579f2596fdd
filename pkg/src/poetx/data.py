"""Byte corpus loading and deterministic batching.

The corpus is raw bytes; the last tenth is the validation region.
Training examples are (context window, next byte) pairs drawn from the
training region with a step-keyed generator; validation examples are a
fixed, evenly spaced sweep of the validation region so every evaluation
sees the same bytes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .linalg import Rng
from .tape import Batch


@dataclass
class ByteCorpus:
    data: np.ndarray  # uint8
    train_end: int
    path: str

    @property
    def train(self) -> np.ndarray:
        return self.data[: self.train_end]

    @property
    def val(self) -> np.ndarray:
        return self.data[self.train_end :]


def load_corpus(path: str) -> ByteCorpus:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"corpus not found: {path}")
    raw = np.frombuffer(p.read_bytes(), dtype=np.uint8)
    if raw.size == 0:
        raise DataError(f"corpus is empty: {path}")
    train_end = int(raw.size * 0.9)
    if train_end == 0 or train_end == raw.size:
        raise DataError(f"corpus too small to split: {raw.size} bytes")
    return ByteCorpus(data=raw.copy(), train_end=train_end, path=path)


def unigram_entropy(region: np.ndarray) -> float:
    """Entropy (nats) of the byte frequency distribution; the loss of
    the best possible context-free predictor."""
    if region.size == 0:
        raise DataError("cannot take entropy of an empty region")
    counts = np.bincount(region, minlength=256).astype(np.float64)
    probs = counts / counts.sum()
    nz = probs[probs > 0]
    return float(-np.sum(nz * np.log(nz)))


def sample_batch(corpus: ByteCorpus, batch_size: int, context_len: int, rng: Rng) -> Batch:
    """Random (context, next byte) windows from the training region."""
    limit = corpus.train_end - context_len
    if limit <= 0:
        raise DataError(
            f"training region ({corpus.train_end} bytes) shorter than context {context_len}"
        )
    starts = rng.integers(0, limit, size=batch_size)
    offsets = np.arange(context_len)
    tokens = corpus.data[starts[:, None] + offsets[None, :]].astype(np.int64)
    targets = corpus.data[starts + context_len].astype(np.int64)
    return Batch(inputs=tokens, targets=targets)


def val_batches(corpus: ByteCorpus, batch_size: int, context_len: int, max_examples: int) -> list:
    """Deterministic evenly spaced windows over the validation region."""
    region = corpus.data[corpus.train_end :]
    avail = region.size - context_len
    if avail <= 0:
        raise DataError(
            f"validation region ({region.size} bytes) shorter than context {context_len}"
        )
    count = min(max_examples, avail)
    starts = (np.arange(count) * avail) // count
    offsets = np.arange(context_len)
    tokens = region[starts[:, None] + offsets[None, :]].astype(np.int64)
    targets = region[starts + context_len].astype(np.int64)
    out = []
    for lo in range(0, count, batch_size):
        hi = min(lo + batch_size, count)
        out.append(Batch(inputs=tokens[lo:hi], targets=targets[lo:hi]))
    return out
