"""Latent-class paired data and Dirichlet client partitions.

Each pair shares a latent class ``u``; the image-like view ``x`` and the
text-like view ``y`` are the class prototypes of their modality plus
independent Gaussian noise. Clients differ in their class mix, drawn from a
symmetric Dirichlet per class.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np


class DegeneratePartition(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorSpec:
    k: int
    proto_x: np.ndarray
    proto_y: np.ndarray
    sigma: float
    seed: int

    @property
    def x_dim(self) -> int:
        return self.proto_x.shape[1]

    @property
    def y_dim(self) -> int:
        return self.proto_y.shape[1]


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    y: np.ndarray
    u: int


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    index: np.ndarray  # global sample ids

    def __len__(self) -> int:
        return self.u.size

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield Sample(self.x[i], self.y[i], int(self.u[i]))

    def take(self, idx) -> "Split":
        idx = np.asarray(idx, dtype=np.int64)
        return Split(self.x[idx], self.y[idx], self.u[idx], self.index[idx])

    @classmethod
    def concat(cls, splits: Sequence["Split"]) -> "Split":
        return cls(
            np.concatenate([s.x for s in splits]),
            np.concatenate([s.y for s in splits]),
            np.concatenate([s.u for s in splits]),
            np.concatenate([s.index for s in splits]),
        )


@dataclass
class ClientDataset:
    client_id: int
    train: Split
    test: Split
    class_histogram: np.ndarray

    @property
    def n_samples(self) -> int:
        return len(self.train) + len(self.test)


def _row_scale(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return m / norms * np.sqrt(m.shape[1])


def make_generator(seed: int, k: int, x_dim: int, y_dim: int, sigma: float) -> GeneratorSpec:
    if k < 1:
        raise ValueError("k must be >= 1")
    if x_dim < 1 or y_dim < 1:
        raise ValueError("dimensions must be >= 1")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    rng = np.random.default_rng(seed)
    proto_x = _row_scale(rng.standard_normal((k, x_dim)))
    proto_y = _row_scale(rng.standard_normal((k, y_dim)))
    for proto in (proto_x, proto_y):
        if k > 1:
            d = np.linalg.norm(proto[:, None, :] - proto[None, :, :], axis=-1)
            if d[~np.eye(k, dtype=bool)].min() <= 0:
                raise ValueError("prototype rows collide; choose another seed")
    return GeneratorSpec(k, proto_x, proto_y, float(sigma), seed)


def emit_pair(gen: GeneratorSpec, u: int, rng: np.random.Generator) -> Sample:
    if not 0 <= u < gen.k:
        raise ValueError(f"class {u} out of range [0, {gen.k})")
    x = gen.proto_x[u] + gen.sigma * rng.standard_normal(gen.x_dim)
    y = gen.proto_y[u] + gen.sigma * rng.standard_normal(gen.y_dim)
    return Sample(x, y, int(u))


def emit_class_block(gen: GeneratorSpec, u: int, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """``n`` pairs of class ``u``; same draw order as ``n`` calls to ``emit_pair``."""
    if not 0 <= u < gen.k:
        raise ValueError(f"class {u} out of range [0, {gen.k})")
    xs = np.empty((n, gen.x_dim))
    ys = np.empty((n, gen.y_dim))
    for i in range(n):
        s = emit_pair(gen, u, rng)
        xs[i], ys[i] = s.x, s.y
    return xs, ys


def largest_remainder(p: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total``; ties go to the lower index."""
    raw = p * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        frac = raw - counts
        order = np.argsort(-frac, kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(class_counts, n_clients: int, concentration: float, seed: int) -> np.ndarray:
    """Per-class, per-client sample counts, shape ``(k, n_clients)``."""
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if not concentration > 0:
        raise ValueError(f"concentration must be > 0, got {concentration}")
    class_counts = np.asarray(class_counts, dtype=np.int64)
    rng = np.random.default_rng(seed)
    plan = np.zeros((class_counts.size, n_clients), dtype=np.int64)
    for c, total in enumerate(class_counts):
        if n_clients == 1:
            plan[c, 0] = total
            continue
        p = rng.dirichlet(np.full(n_clients, float(concentration)))
        # extreme concentrations can underflow to all-zero draws
        if not np.all(np.isfinite(p)) or p.sum() <= 0:
            p = np.full(n_clients, 1.0 / n_clients)
        plan[c] = largest_remainder(p / p.sum(), int(total))
    return plan


def build_client_datasets(
    gen: GeneratorSpec,
    plan: np.ndarray,
    samples_per_class,
    test_fraction: float,
    seed: int,
) -> list[ClientDataset]:
    """Materialise samples and split them per client.

    ``samples_per_class`` is an int (balanced) or one total per class; it must
    agree with the row sums of ``plan``.
    """
    if not 0 <= test_fraction < 1:
        raise ValueError("test_fraction must lie in [0, 1)")
    plan = np.asarray(plan, dtype=np.int64)
    k, n_clients = plan.shape
    if k != gen.k:
        raise ValueError("plan rows must match the generator's class count")
    totals = np.broadcast_to(np.asarray(samples_per_class, dtype=np.int64), (k,))
    if not np.array_equal(plan.sum(axis=1), totals):
        raise ValueError("partition plan does not conserve per-class totals")
    empty = [i for i in range(n_clients) if plan[:, i].sum() == 0]
    if empty:
        raise DegeneratePartition(f"degenerate partition - reseed (clients {empty} received no samples)")

    rng = np.random.default_rng(seed)
    per_client: list[list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]] = [[] for _ in range(n_clients)]
    next_id = 0
    for u in range(k):
        n = int(totals[u])
        xs, ys = emit_class_block(gen, u, n, rng)
        ids = np.arange(next_id, next_id + n)
        next_id += n
        perm = rng.permutation(n)
        start = 0
        for c in range(n_clients):
            take = perm[start : start + plan[u, c]]
            start += plan[u, c]
            per_client[c].append((xs[take], ys[take], np.full(take.size, u), ids[take]))

    datasets = []
    for c in range(n_clients):
        parts = per_client[c]
        full = Split(
            np.concatenate([p[0] for p in parts]),
            np.concatenate([p[1] for p in parts]),
            np.concatenate([p[2] for p in parts]).astype(np.int64),
            np.concatenate([p[3] for p in parts]).astype(np.int64),
        )
        n = len(full)
        order = rng.permutation(n)
        n_test = int(round(test_fraction * n))
        if n - n_test < 1:
            n_test = n - 1
        datasets.append(
            ClientDataset(
                client_id=c,
                train=full.take(np.sort(order[n_test:])),
                test=full.take(np.sort(order[:n_test])),
                class_histogram=plan[:, c].copy(),
            )
        )
    return datasets


def make_clients(
    seed: int,
    n_clients: int,
    k: int,
    x_dim: int,
    y_dim: int,
    sigma: float,
    samples_per_class,
    concentration: float,
    test_fraction: float,
) -> list[ClientDataset]:
    """Generator, partition and materialisation with seeds derived from one root."""
    root = np.random.SeedSequence(seed)
    gen_seed, part_seed, data_seed = (int(s.generate_state(1)[0]) for s in root.spawn(3))
    gen = make_generator(gen_seed, k, x_dim, y_dim, sigma)
    totals = np.broadcast_to(np.asarray(samples_per_class, dtype=np.int64), (k,))
    plan = dirichlet_partition(totals, n_clients, concentration, part_seed)
    return build_client_datasets(gen, plan, totals, test_fraction, data_seed)


def class_proportions(histogram) -> np.ndarray:
    h = np.asarray(histogram, dtype=np.float64)
    total = h.sum()
    return h / total if total > 0 else h


def mean_pairwise_tv(plan: np.ndarray) -> float:
    """Mean total-variation distance between client class distributions."""
    plan = np.asarray(plan, dtype=np.float64)
    n = plan.shape[1]
    if n < 2:
        return 0.0
    props = [class_proportions(plan[:, c]) for c in range(n)]
    dists = [0.5 * np.abs(props[i] - props[j]).sum() for i in range(n) for j in range(i + 1, n)]
    return float(np.mean(dists))


def export_csv(dataset: ClientDataset, path: str | Path) -> Path:
    """Write ``split,u,x_0..,y_0..`` rows for one client."""
    path = Path(path)
    dx = dataset.train.x.shape[1]
    dy = dataset.train.y.shape[1]
    header = ["split", "u"] + [f"x_{i}" for i in range(dx)] + [f"y_{i}" for i in range(dy)]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for name, split in (("train", dataset.train), ("test", dataset.test)):
            for i in range(len(split)):
                writer.writerow([name, int(split.u[i])] + [repr(float(v)) for v in split.x[i]] + [repr(float(v)) for v in split.y[i]])
    return path


def read_csv(path: str | Path, client_id: int = 0, k: Optional[int] = None) -> ClientDataset:
    """Inverse of :func:`export_csv` (global sample ids are not stored)."""
    rows = {"train": [], "test": []}
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        dx = sum(1 for h in header if h.startswith("x_"))
        for row in reader:
            rows[row[0]].append([float(v) for v in row[1:]])
    splits = {}
    offset = 0
    for name in ("train", "test"):
        arr = np.asarray(rows[name], dtype=np.float64).reshape(len(rows[name]), -1) if rows[name] else np.zeros((0, len(header) - 1))
        u = arr[:, 0].astype(np.int64)
        splits[name] = Split(arr[:, 1 : 1 + dx], arr[:, 1 + dx :], u, np.arange(offset, offset + u.size))
        offset += u.size
    n_classes = k if k is not None else int(max(splits["train"].u.max(initial=-1), splits["test"].u.max(initial=-1)) + 1)
    hist = np.bincount(np.concatenate([splits["train"].u, splits["test"].u]), minlength=n_classes)
    return ClientDataset(client_id, splits["train"], splits["test"], hist)
