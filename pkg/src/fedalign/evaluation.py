"""Retrieval metrics, pair-similarity diagnostics and the distortion probe."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from . import nn_core
from .synthetic_data import ClientDataset, Split
from .training import derive_rng, train_task

ModelOrModels = Union[nn_core.TwoTowerModel, Sequence[nn_core.TwoTowerModel]]


def retrieval_ranks(
    model: nn_core.TwoTowerModel,
    test: Split,
    pool_size: int,
    seed: int,
    direction: str = "text_to_image",
) -> np.ndarray:
    """Rank of each query's true partner inside its pool (0 = top).

    The shuffled test set is cut into consecutive pools of ``pool_size``; a
    trailing remainder smaller than one pool is dropped. Equal scores rank
    the lower candidate index first.
    """
    n = len(test)
    if pool_size < 1:
        raise ValueError("pool_size must be >= 1")
    if n < pool_size:
        raise ValueError(f"test set of {n} samples is smaller than pool_size={pool_size}")
    if direction not in ("text_to_image", "image_to_text"):
        raise ValueError(f"unknown retrieval direction {direction!r}")
    perm = np.random.default_rng(seed).permutation(n)
    n_pools = n // pool_size
    ranks = []
    for p in range(n_pools):
        idx = perm[p * pool_size : (p + 1) * pool_size]
        z_img, z_txt = nn_core.embed(model, test.x[idx], test.y[idx])
        queries, candidates = (z_txt, z_img) if direction == "text_to_image" else (z_img, z_txt)
        sims = queries @ candidates.T
        target = np.diag(sims)[:, None]
        better = (sims > target).sum(axis=1)
        earlier_tie = np.tril(sims == target, k=-1).sum(axis=1)
        ranks.append(better + earlier_tie)
    return np.concatenate(ranks)


def recall_at_k(
    model: nn_core.TwoTowerModel,
    test_samples: Split,
    k: int,
    pool_size: int,
    seed: int,
    direction: str = "text_to_image",
) -> float:
    if not 1 <= k <= pool_size:
        raise ValueError("need 1 <= k <= pool_size")
    ranks = retrieval_ranks(model, test_samples, pool_size, seed, direction)
    return float(np.mean(ranks < k))


@dataclass
class RetrievalReport:
    per_client: dict[int, list[float]]  # k -> recall per client
    mean: dict[int, float]
    worst: dict[int, float]
    pool_size: list[int] = field(default_factory=list)

    @property
    def mean1(self) -> float:
        return self.mean[1]

    @property
    def worst1(self) -> float:
        return self.worst[1]

    @property
    def mean5(self) -> float:
        return self.mean[5]

    @property
    def worst5(self) -> float:
        return self.worst[5]

    def to_dict(self) -> dict:
        return {
            "per_client": {str(k): v for k, v in self.per_client.items()},
            "mean": {str(k): v for k, v in self.mean.items()},
            "worst": {str(k): v for k, v in self.worst.items()},
            "pool_size": list(self.pool_size),
        }


def _models_for(models: ModelOrModels) -> list[nn_core.TwoTowerModel]:
    if isinstance(models, nn_core.TwoTowerModel):
        return [models]
    return list(models)


def per_client_report(
    models: ModelOrModels,
    clients: Sequence[ClientDataset],
    k_list: Sequence[int] = (1, 5),
    pool_size: int = 100,
    seed: int = 0,
    clip_pool: bool = True,
    direction: str = "text_to_image",
) -> RetrievalReport:
    """Recall@k on each client's test split.

    Passing several models (one per client, as in purely local training)
    scores every model on every client and averages over models. With
    ``clip_pool`` a client whose test split is smaller than ``pool_size``
    is scored with a single pool of its whole split.
    """
    models = _models_for(models)
    per_client: dict[int, list[float]] = {k: [] for k in k_list}
    pools = []
    for client in clients:
        pool = min(pool_size, len(client.test)) if clip_pool else pool_size
        pools.append(pool)
        client_seed = int(derive_rng(seed, client.client_id, 0, "eval").integers(2**62))
        ranks = [retrieval_ranks(m, client.test, pool, client_seed, direction) for m in models]
        for k in k_list:
            if k > pool:
                raise ValueError(f"k={k} exceeds the pool size {pool} of client {client.client_id}")
            per_client[k].append(float(np.mean([np.mean(r < k) for r in ranks])))
    mean = {k: float(np.mean(v)) for k, v in per_client.items()}
    worst = {k: float(np.min(v)) for k, v in per_client.items()}
    return RetrievalReport(per_client, mean, worst, pools)


def pair_similarity(
    model: nn_core.TwoTowerModel,
    dataset: Union[ClientDataset, Split],
    batches: int | None = None,
    batch_size: int = 32,
    rng: np.random.Generator | None = None,
) -> float:
    """Mean cosine similarity of paired embeddings.

    Uses every pair of the split unless ``batches`` is given, in which case
    that many batches are sampled with replacement.
    """
    split = dataset.test if isinstance(dataset, ClientDataset) else dataset
    if len(split) == 0:
        raise ValueError("empty split")
    if batches is None:
        x, y = split.x, split.y
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        idx = rng.integers(0, len(split), size=batches * batch_size)
        x, y = split.x[idx], split.y[idx]
    z_img, z_txt = nn_core.embed(model, x, y)
    return float(np.mean(np.einsum("ij,ij->i", z_img, z_txt)))


def mean_pair_similarity(models: ModelOrModels, clients: Sequence[ClientDataset]) -> list[float]:
    models = _models_for(models)
    return [float(np.mean([pair_similarity(m, c.test) for m in models])) for c in clients]


@dataclass
class DistortionTable:
    drops: np.ndarray  # [retrain client, eval client]
    before: np.ndarray
    after: np.ndarray

    @property
    def avg_row(self) -> np.ndarray:
        """Per-eval-client drop averaged over retraining clients."""
        return self.drops.mean(axis=0)

    @property
    def mean_drop(self) -> float:
        return float(self.drops.mean())

    def to_dict(self) -> dict:
        return {
            "drops": self.drops.tolist(),
            "avg": self.avg_row.tolist(),
            "mean_drop": self.mean_drop,
            "before": self.before.tolist(),
            "after": self.after.tolist(),
        }


def distortion_probe(
    global_model: nn_core.TwoTowerModel,
    clients: Sequence[ClientDataset],
    retrain_steps: int,
    lr: float,
    tau: float,
    batch_size: int = 32,
    seed: int = 0,
) -> DistortionTable:
    """Retrain a copy of the model on each client alone and measure the
    pair-similarity drop on every client's test split."""
    if retrain_steps < 0:
        raise ValueError("retrain_steps must be >= 0")
    before = np.array([pair_similarity(global_model, c.test) for c in clients])
    n = len(clients)
    after = np.empty((n, n))
    for r, client in enumerate(clients):
        model = global_model.copy()
        if retrain_steps > 0 and lr > 0:
            rng = derive_rng(seed, client.client_id, 0, "probe")
            model, _ = train_task(model, client.train, retrain_steps, lr, tau, batch_size, rng)
            after[r] = [pair_similarity(model, c.test) for c in clients]
        else:
            after[r] = before
    drops = before[None, :] - after
    return DistortionTable(drops, before, after)
