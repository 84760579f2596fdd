import numpy as np
import pytest

from poetx.profiler import COUNTERS


@pytest.fixture(autouse=True)
def _reset_counters():
    COUNTERS.reset()
    yield
    COUNTERS.reset()


def markov_bytes(n: int, key: int = 99) -> bytes:
    """Order-1 Markov chain over 64 printable-ish byte values.

    Strong conditional structure (most mass on two affine successor
    maps) with a near-uniform stationary distribution, so a context
    model has a lot to gain over the best context-free predictor.
    """
    rng = np.random.Generator(np.random.Philox(key=np.array([key, 1], dtype=np.uint64)))
    u = rng.random(n)
    jumps = rng.integers(0, 64, size=n)
    out = bytearray(n)
    v = 0
    for i in range(n):
        r = u[i]
        if r < 0.7:
            v = (v * 7 + 3) % 64
        elif r < 0.9:
            v = (v * 3 + 11) % 64
        else:
            v = int(jumps[i])
        out[i] = 32 + v
    return bytes(out)


@pytest.fixture(scope="session")
def markov_corpus(tmp_path_factory):
    """1 MB corpus for end-to-end language model runs."""
    path = tmp_path_factory.mktemp("corpus") / "markov.bin"
    path.write_bytes(markov_bytes(1_000_000))
    return str(path)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """20 KB corpus from the same process, for smoke tests."""
    path = tmp_path_factory.mktemp("corpus") / "small.bin"
    path.write_bytes(markov_bytes(20_000, key=7))
    return str(path)
