"""Batch sampling, RNG derivation and the plain contrastive SGD loop."""

from __future__ import annotations

import numpy as np

from . import nn_core
from .losses import info_nce
from .synthetic_data import Split

_TAGS = {"stage1": 1, "stage2": 2, "task": 3, "loss": 4, "eval": 5, "probe": 6, "central": 7}


def derive_rng(seed: int, client_id: int, round_idx: int, tag: str) -> np.random.Generator:
    """Stream keyed by (seed, client, round, purpose), independent of scheduling."""
    return np.random.default_rng([int(seed), int(client_id), int(round_idx), _TAGS[tag]])


def sample_batch(split: Split, batch_size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform sampling with replacement."""
    n = len(split)
    if n == 0:
        raise ValueError("empty train split")
    idx = rng.integers(0, n, size=batch_size)
    return split.x[idx], split.y[idx]


def task_loss_and_grad(model: nn_core.TwoTowerModel, x, y, tau: float):
    cache = nn_core.forward(model, x, y)
    out = info_nce(cache.z_I, cache.z_T, tau)
    grads = nn_core.backward(cache, model, out.grad_zI, out.grad_zT)
    return out.value, grads


def train_task(
    model: nn_core.TwoTowerModel,
    split: Split,
    steps: int,
    lr: float,
    tau: float,
    batch_size: int,
    rng: np.random.Generator,
    step_weight: float = 1.0,
) -> tuple[nn_core.TwoTowerModel, float]:
    """``steps`` SGD steps on InfoNCE alone; returns the model and last batch loss."""
    last = float("nan")
    if steps > 0 and len(split) == 0:
        raise ValueError("empty train split")
    for _ in range(steps):
        x, y = sample_batch(split, batch_size, rng)
        last, grads = task_loss_and_grad(model, x, y, tau)
        model = nn_core.apply_sgd(model, grads, lr, step_weight)
    return model, last
