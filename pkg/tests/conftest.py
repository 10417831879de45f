import numpy as np
import pytest

from fedalign import nn_core


def central_fd(fn, values: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of a flat vector."""
    grad = np.zeros_like(values)
    for i in range(values.size):
        orig = values[i]
        values[i] = orig + h
        up = fn(values)
        values[i] = orig - h
        down = fn(values)
        values[i] = orig
        grad[i] = (up - down) / (2 * h)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def unit_rows(rng, n, d):
    z = rng.standard_normal((n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


@pytest.fixture
def tiny_dims():
    return nn_core.ModelDims(x_dim=4, y_dim=3, hidden_dim=5, embed_dim=4, encoder_layers=1, aligner_layers=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
