import numpy as np
import pytest

from seqnat.core import make_rng, softmax_rows

# relative errors are taken against max(|a|, |b|, REL_FLOOR) so exact zeros stay comparable
REL_FLOOR = 1e-6


def max_rel_err(a, b, floor=REL_FLOOR):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def numeric_grad(f, x, h=1e-5):
    """Central finite differences of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f(x)
        x[idx] = old - h
        down = f(x)
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def random_probs(rng, T, V, scale=1.5):
    return softmax_rows(scale * rng.normal(size=(T, V)))


@pytest.fixture
def rng():
    return make_rng(12345)
