import numpy as np
import pytest

from pbmrc.model import preset
from pbmrc.synthetic import synthetic_corpus, synthetic_registry, synthetic_vocab


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar f() w.r.t. every entry of array x (in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def max_rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture(scope="session")
def syn():
    corpus = synthetic_corpus()
    registry = synthetic_registry()
    vocab = synthetic_vocab(corpus, registry)
    return corpus, registry, vocab


@pytest.fixture(scope="session")
def desk_config(syn):
    return preset("desk", vocab_size=len(syn[2]))
