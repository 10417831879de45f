"""Simulated federated rounds.

The guided two-stage protocol ("fedaid") runs, per round:

1. broadcast the server model and client weights,
2. stage 1 on every client: train a teacher aligner against a learnable
   encoder copy; the server averages the aligners,
3. stage 2 on every client: train the full model under guidance from the
   frozen (server encoders, new aligner) anchor; the server averages the
   encoders,
4. score every client on the new global model and move the client weights
   one mirror-ascent step inside the uncertainty ball.

Network transfer is an in-process parameter copy. Clients within a stage are
independent and may run on a thread pool; every client draws from its own
RNG stream so results do not depend on scheduling.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from . import nn_core
from .config import ExperimentConfig
from .dro_weights import DroState
from .evaluation import mean_pair_similarity, per_client_report
from .losses import Hyper, dro_loss, info_nce, local_loss
from .nn_core import ParamVector, TwoTowerModel
from .synthetic_data import ClientDataset, Split, make_clients
from .training import derive_rng, sample_batch, train_task


class Strategy(str, Enum):
    FEDAID = "fedaid"
    FEDAVG = "fedavg"
    CENTRALIZED = "centralized"
    DECENTRALIZED = "decentralized"


class AnchorMutated(RuntimeError):
    pass


@dataclass
class ServerState:
    global_model: TwoTowerModel
    dro: DroState
    round: int = 0
    seed: int = 0
    pooled_train: Optional[Split] = field(default=None, repr=False)


@dataclass
class ClientState:
    client_id: int
    dataset: ClientDataset
    local_model: Optional[TwoTowerModel] = None
    anchor_model: Optional[TwoTowerModel] = None
    encoder_copy: Optional[TwoTowerModel] = None
    last_loss: float = float("nan")


@dataclass
class RoundMetrics:
    round: int
    v: list[float]
    w: list[float]
    loss_stage1: Optional[float]
    loss_stage2: Optional[float]
    recall: dict[int, list[float]]
    mean: dict[int, float]
    worst: dict[int, float]
    pair_sim: list[float]

    def to_record(self) -> dict:
        rec = {
            "round": self.round,
            "v": self.v,
            "w": self.w,
            "loss_stage1": self.loss_stage1,
            "loss_stage2": self.loss_stage2,
        }
        for k in sorted(self.recall):
            rec[f"recall{k}"] = self.recall[k]
        for k in sorted(self.recall):
            rec[f"mean{k}"] = self.mean[k]
            rec[f"worst{k}"] = self.worst[k]
        rec["pair_sim"] = self.pair_sim
        return rec


def aggregate_mean(
    params: Sequence[ParamVector],
    segment_filter="all",
    current: Optional[ParamVector] = None,
    weights: Optional[Sequence[float]] = None,
) -> ParamVector:
    """Average the selected segment group; other segments come from ``current``.

    ``weights`` switches the unweighted mean for a convex combination.
    """
    if not params:
        raise ValueError("need at least one parameter vector")
    layout = params[0].layout
    for p in params[1:]:
        p.check_layout(layout)
    group = nn_core.resolve_group(segment_filter)
    stack = np.stack([p.values for p in params])
    if weights is None:
        avg = stack.mean(axis=0)
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (len(params),):
            raise ValueError("one weight per parameter vector required")
        avg = weights @ stack / weights.sum()
    if group is None:
        return ParamVector(avg, layout)
    if current is None:
        raise ValueError("a current server vector is required when averaging a subset")
    current.check_layout(layout)
    out = current.values.copy()
    mask = nn_core.group_mask(layout, group)
    out[mask] = avg[mask]
    return ParamVector(out, layout)


def stage1_step(work: TwoTowerModel, anchor: TwoTowerModel, x, y, hyper: Hyper):
    """Loss and routed gradient for one teacher-aligner step.

    ``work`` carries the learnable encoder copy (encoders) and the teacher
    aligner (aligners); ``anchor`` supplies the frozen aggregated encoder and
    the frozen local aligner.
    """
    clean = nn_core.forward(work, x, y, encoder_from=anchor)
    copy = nn_core.forward(work, x, y)
    local = nn_core.forward(work, x, y, aligner_from=anchor)
    out = dro_loss(clean.z_I, clean.z_T, copy.z_I, copy.z_T, local.z_I, local.z_T, hyper)
    g = out.grads
    g_clean = nn_core.backward(clean, work, g[0], g[1]).values
    g_copy = nn_core.backward(copy, work, g[2], g[3]).values
    g_local = nn_core.backward(local, work, g[4], g[5]).values
    aligners = nn_core.group_mask(work.layout, "aligners")
    total = g_copy.copy()
    total[aligners] += g_clean[aligners]
    total[~aligners] += g_local[~aligners]
    return out.value, nn_core.GradSet(total, work.layout)


def stage2_step(model: TwoTowerModel, anchor: TwoTowerModel, x, y, hyper: Hyper):
    cache = nn_core.forward(model, x, y)
    anchor_cache = nn_core.forward(anchor, x, y)
    out = local_loss(cache, anchor_cache, hyper)
    return out.value, nn_core.backward(cache, model, out.grad_zI, out.grad_zT)


def local_train_stage1(
    client: ClientState,
    steps: int,
    lr: float,
    w_i: float,
    hyper: Hyper,
    batch_size: int,
    rng: np.random.Generator,
    fixed_batch: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> tuple[ParamVector, float]:
    """Train the teacher aligner; returns the client's full vector (only its
    aligner segment is meant for aggregation) and the last batch loss."""
    if len(client.dataset.train) == 0:
        raise ValueError(f"client {client.client_id} has an empty train split")
    anchor = client.anchor_model
    # encoders of `work` are the copy f', aligners are the teacher being trained
    work = nn_core.replace_group(client.encoder_copy, nn_core.flatten(client.local_model), "aligners")
    last = float("nan")
    for _ in range(steps):
        x, y = fixed_batch if fixed_batch is not None else sample_batch(client.dataset.train, batch_size, rng)
        last, grads = stage1_step(work, anchor, x, y, hyper)
        work = nn_core.apply_sgd(work, grads, lr, w_i)
    client.local_model = nn_core.replace_group(client.local_model, nn_core.flatten(work), "aligners")
    client.encoder_copy = work
    return nn_core.flatten(client.local_model), last


def local_train_stage2(
    client: ClientState,
    steps: int,
    lr: float,
    w_i: float,
    hyper: Hyper,
    batch_size: int,
    rng: np.random.Generator,
    fixed_batch: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> tuple[ParamVector, float]:
    """Guided full-model training; returns the client's vector and last batch loss."""
    if len(client.dataset.train) == 0:
        raise ValueError(f"client {client.client_id} has an empty train split")
    anchor = client.anchor_model
    model = client.local_model
    last = float("nan")
    for _ in range(steps):
        x, y = fixed_batch if fixed_batch is not None else sample_batch(client.dataset.train, batch_size, rng)
        last, grads = stage2_step(model, anchor, x, y, hyper)
        model = nn_core.apply_sgd(model, grads, lr, w_i)
    client.local_model = model
    return nn_core.flatten(model), last


def client_loss(
    global_model: TwoTowerModel,
    dataset: ClientDataset,
    tau: float,
    batches: int,
    batch_size: int,
    rng: np.random.Generator,
) -> float:
    """Mean InfoNCE of the aggregated model over sampled train batches.

    The guidance term vanishes when the model is its own anchor, so the task
    loss is all that remains.
    """
    if len(dataset.train) == 0:
        raise ValueError("empty dataset")
    if batches < 1:
        raise ValueError("need at least one evaluation batch")
    values = []
    for _ in range(batches):
        x, y = sample_batch(dataset.train, batch_size, rng)
        z_img, z_txt = nn_core.embed(global_model, x, y)
        values.append(info_nce(z_img, z_txt, tau).value)
    return float(np.mean(values))


def _map(fn: Callable, items: Sequence, executor: Optional[ThreadPoolExecutor]) -> list:
    if executor is None:
        return [fn(item) for item in items]
    return list(executor.map(fn, items))


def _hyper(config: ExperimentConfig) -> Hyper:
    return Hyper(tau=config.tau, alpha=config.alpha, beta=config.beta)


def _step_weights(server: ServerState, config: ExperimentConfig, strategy: Strategy) -> np.ndarray:
    n = server.dro.w.size
    if strategy is Strategy.FEDAID and config.dro_mode == "step_scale":
        return server.dro.w.copy()
    return np.full(n, 1.0 / n)


def _client_losses(model_for: Callable[[int], TwoTowerModel], clients, config, round_idx, executor) -> list[float]:
    def one(c: ClientState) -> float:
        rng = derive_rng(config.seed, c.client_id, round_idx, "loss")
        return client_loss(model_for(c.client_id), c.dataset, config.tau, config.loss_batches, config.batch_size, rng)

    return _map(one, clients, executor)


def _round_fedaid(server, clients, config, executor):
    r = server.round
    hyper = _hyper(config)
    weights = _step_weights(server, config, Strategy.FEDAID)
    broadcast = server.global_model

    for c in clients:
        c.anchor_model = broadcast.copy()
        c.local_model = broadcast.copy()
        c.encoder_copy = broadcast.copy()
    checks = {c.client_id: c.anchor_model.checksum() for c in clients}

    def stage1(item):
        i, c = item
        rng = derive_rng(config.seed, c.client_id, r, "stage1")
        return local_train_stage1(c, config.local_steps, config.lr, float(weights[i]), hyper, config.batch_size, rng)

    out1 = _map(stage1, list(enumerate(clients)), executor)
    _verify_anchors(clients, checks)
    agg_weights = server.dro.w if config.dro_mode == "loss_weight" else None
    aligners = aggregate_mean([p for p, _ in out1], "aligners", nn_core.flatten(broadcast), agg_weights)
    with_aligner = nn_core.load(broadcast, aligners)

    for c in clients:
        c.encoder_copy = None  # discarded: only the aligner is sent back
        c.anchor_model = with_aligner.copy()
        c.local_model = with_aligner.copy()
    checks = {c.client_id: c.anchor_model.checksum() for c in clients}

    def stage2(item):
        i, c = item
        rng = derive_rng(config.seed, c.client_id, r, "stage2")
        return local_train_stage2(c, config.local_steps, config.lr, float(weights[i]), hyper, config.batch_size, rng)

    out2 = _map(stage2, list(enumerate(clients)), executor)
    _verify_anchors(clients, checks)
    encoders = aggregate_mean([p for p, _ in out2], "encoders", nn_core.flatten(with_aligner))
    server.global_model = nn_core.load(with_aligner, encoders)

    v = _client_losses(lambda _: server.global_model, clients, config, r, executor)
    server.dro.update(v)
    return v, float(np.mean([l for _, l in out1])), float(np.mean([l for _, l in out2]))


def _round_fedavg(server, clients, config, executor):
    r = server.round
    weights = _step_weights(server, config, Strategy.FEDAVG)
    broadcast = server.global_model

    def train(item):
        i, c = item
        rng = derive_rng(config.seed, c.client_id, r, "task")
        c.local_model, last = train_task(
            broadcast.copy(), c.dataset.train, config.local_steps, config.lr, config.tau, config.batch_size, rng, float(weights[i])
        )
        return nn_core.flatten(c.local_model), last

    out = _map(train, list(enumerate(clients)), executor)
    server.global_model = nn_core.load(broadcast, aggregate_mean([p for p, _ in out]))
    v = _client_losses(lambda _: server.global_model, clients, config, r, executor)
    return v, float(np.mean([l for _, l in out])), None


def _round_decentralized(server, clients, config, executor):
    r = server.round
    weights = _step_weights(server, config, Strategy.DECENTRALIZED)

    def train(item):
        i, c = item
        if c.local_model is None:
            c.local_model = server.global_model.copy()
        rng = derive_rng(config.seed, c.client_id, r, "task")
        c.local_model, last = train_task(
            c.local_model, c.dataset.train, config.local_steps, config.lr, config.tau, config.batch_size, rng, float(weights[i])
        )
        return last

    losses = _map(train, list(enumerate(clients)), executor)
    by_id = {c.client_id: c.local_model for c in clients}
    v = _client_losses(lambda cid: by_id[cid], clients, config, r, executor)
    return v, float(np.mean(losses)), None


def _round_centralized(server, clients, config, executor):
    r = server.round
    n = len(clients)
    if server.pooled_train is None:
        server.pooled_train = Split.concat([c.dataset.train for c in clients])
    rng = derive_rng(config.seed, 0, r, "central")
    server.global_model, last = train_task(
        server.global_model, server.pooled_train, n * config.local_steps, config.lr, config.tau, config.batch_size, rng, 1.0 / n
    )
    v = _client_losses(lambda _: server.global_model, clients, config, r, executor)
    return v, last, None


_ROUNDS = {
    Strategy.FEDAID: _round_fedaid,
    Strategy.FEDAVG: _round_fedavg,
    Strategy.DECENTRALIZED: _round_decentralized,
    Strategy.CENTRALIZED: _round_centralized,
}


def _verify_anchors(clients: Sequence[ClientState], checks: dict[int, int]) -> None:
    for c in clients:
        if c.anchor_model.checksum() != checks[c.client_id]:
            raise AnchorMutated(f"anchor of client {c.client_id} changed during local training")


def evaluation_models(server: ServerState, clients: Sequence[ClientState], strategy: Strategy):
    if strategy is Strategy.DECENTRALIZED and all(c.local_model is not None for c in clients):
        return [c.local_model for c in clients]
    return server.global_model


def run_round(
    server: ServerState,
    clients: Sequence[ClientState],
    strategy: Strategy | str,
    config: ExperimentConfig,
    executor: Optional[ThreadPoolExecutor] = None,
    evaluate: bool = True,
) -> RoundMetrics:
    strategy = Strategy(strategy)
    v, loss1, loss2 = _ROUNDS[strategy](server, clients, config, executor)
    for c, vi in zip(clients, v):
        c.last_loss = vi
    server.round += 1
    datasets = [c.dataset for c in clients]
    if evaluate:
        models = evaluation_models(server, clients, strategy)
        report = per_client_report(models, datasets, config.eval_k_list, config.eval_pool_size, config.seed)
        recall, mean, worst = report.per_client, report.mean, report.worst
        pair_sim = mean_pair_similarity(models, datasets)
    else:
        recall, mean, worst, pair_sim = {}, {}, {}, []
    return RoundMetrics(
        round=server.round,
        v=[float(x) for x in v],
        w=[float(x) for x in server.dro.w],
        loss_stage1=loss1,
        loss_stage2=loss2,
        recall=recall,
        mean=mean,
        worst=worst,
        pair_sim=pair_sim,
    )


def _seed_for(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([int(seed), tag]).generate_state(1)[0])


def build_datasets(config: ExperimentConfig) -> list[ClientDataset]:
    totals: int | np.ndarray = config.samples_per_class
    if config.class_balance == "unbalanced":
        from .synthetic_data import largest_remainder

        rng = np.random.default_rng(_seed_for(config.seed, 11))
        p = rng.dirichlet(np.ones(config.k_classes))
        totals = np.maximum(largest_remainder(p, config.samples_per_class * config.k_classes), 1)
    return make_clients(
        _seed_for(config.seed, 1),
        config.n_clients,
        config.k_classes,
        config.x_dim,
        config.y_dim,
        config.noise_sigma,
        totals,
        config.dirichlet_concentration,
        config.test_fraction,
    )


def initial_state(config: ExperimentConfig, datasets: Optional[Sequence[ClientDataset]] = None):
    datasets = list(datasets) if datasets is not None else build_datasets(config)
    model = nn_core.init_model(config.model_dims, _seed_for(config.seed, 2))
    server = ServerState(model, DroState.uniform(len(datasets), config.rho, config.gamma), 0, config.seed)
    clients = [ClientState(d.client_id, d) for d in datasets]
    return server, clients


@dataclass
class ExperimentResult:
    metrics: list[RoundMetrics]
    final_model: TwoTowerModel
    local_models: list[TwoTowerModel]
    server: ServerState
    clients: list[ClientState]


def iter_rounds(
    config: ExperimentConfig,
    server: ServerState,
    clients: Sequence[ClientState],
    threads: int = 1,
) -> Iterator[RoundMetrics]:
    strategy = Strategy(config.strategy)
    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for _ in range(config.rounds):
            metrics = run_round(server, clients, strategy, config, executor)
            if not all(math.isfinite(x) for x in metrics.v):
                raise FloatingPointError(f"non-finite client loss in round {metrics.round}")
            yield metrics
    finally:
        if executor is not None:
            executor.shutdown()


def run_experiment(
    config: ExperimentConfig,
    datasets: Optional[Sequence[ClientDataset]] = None,
    threads: int = 1,
    on_round: Optional[Callable[[RoundMetrics], None]] = None,
) -> ExperimentResult:
    server, clients = initial_state(config, datasets)
    metrics = []
    for m in iter_rounds(config, server, clients, threads):
        metrics.append(m)
        if on_round is not None:
            on_round(m)
    locals_ = [c.local_model for c in clients if c.local_model is not None]
    return ExperimentResult(metrics, server.global_model, locals_, server, clients)
