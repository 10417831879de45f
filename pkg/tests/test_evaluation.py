import numpy as np
import pytest

from fedalign import nn_core
from fedalign.evaluation import (
    distortion_probe,
    pair_similarity,
    per_client_report,
    recall_at_k,
    retrieval_ranks,
)
from fedalign.synthetic_data import ClientDataset, Split, make_clients


def _identity_model(d: int) -> nn_core.TwoTowerModel:
    """Both towers compute tanh(x) followed by an identity aligner."""
    dims = nn_core.ModelDims(d, d, d, d, 1, 1)
    m = nn_core.TwoTowerModel(dims)
    for part in nn_core.PARTS:
        m.parts[part][0].weight[...] = np.eye(d)
    return m


def _orthogonal_split(n: int, d: int) -> Split:
    x = np.eye(d)[:n] * 0.5
    return Split(x, x.copy(), np.arange(n), np.arange(n))


def test_perfect_model_recall_one():
    split = _orthogonal_split(8, 8)
    assert recall_at_k(_identity_model(8), split, 1, 8, 0) == 1.0


def test_recall_full_pool_is_one(rng):
    m = nn_core.init_model(nn_core.ModelDims(3, 3, 4, 4), 0)
    split = Split(rng.standard_normal((20, 3)), rng.standard_normal((20, 3)), np.zeros(20, int), np.arange(20))
    assert recall_at_k(m, split, 10, 10, 1) == 1.0


def test_recall_errors(rng):
    m = nn_core.init_model(nn_core.ModelDims(3, 3, 4, 4), 0)
    split = Split(rng.standard_normal((5, 3)), rng.standard_normal((5, 3)), np.zeros(5, int), np.arange(5))
    with pytest.raises(ValueError):
        recall_at_k(m, split, 1, 10, 0)


def test_random_model_is_at_chance():
    rng = np.random.default_rng(3)
    n, pool = 4000, 100
    m = nn_core.init_model(nn_core.ModelDims(16, 16, 32, 16), 5)
    split = Split(rng.standard_normal((n, 16)), rng.standard_normal((n, 16)), np.zeros(n, int), np.arange(n))
    for k in (1, 5):
        p = k / pool
        se = np.sqrt(p * (1 - p) / n)
        assert abs(recall_at_k(m, split, k, pool, 0) - p) < 3 * se


def test_ties_break_to_lower_index():
    # constant embeddings: every candidate ties, only the first query hits at k=1
    d = 2
    m = _identity_model(d)
    x = np.tile([[0.3, 0.4]], (4, 1))
    split = Split(x, x.copy(), np.zeros(4, int), np.arange(4))
    ranks = retrieval_ranks(m, split, 4, 0)
    assert sorted(ranks.tolist()) == [0, 1, 2, 3]


def test_recall_monotone_in_k(rng):
    m = nn_core.init_model(nn_core.ModelDims(4, 4, 6, 5), 2)
    split = Split(rng.standard_normal((300, 4)), rng.standard_normal((300, 4)), np.zeros(300, int), np.arange(300))
    values = [recall_at_k(m, split, k, 50, 7) for k in range(1, 51)]
    assert all(a <= b for a, b in zip(values, values[1:]))


def _toy_clients():
    return make_clients(4, 2, 4, 3, 3, 0.5, 60, 1.0, 0.5)


def test_report_matches_manual_recomputation():
    clients = _toy_clients()
    m = nn_core.init_model(nn_core.ModelDims(3, 3, 5, 4), 1)
    rep = per_client_report(m, clients, (1, 5), pool_size=20, seed=3)
    from fedalign.training import derive_rng

    for i, c in enumerate(clients):
        seed = int(derive_rng(3, c.client_id, 0, "eval").integers(2**62))
        perm = np.random.default_rng(seed).permutation(len(c.test))
        hits = []
        for p in range(len(c.test) // 20):
            idx = perm[p * 20 : (p + 1) * 20]
            zi, zt = nn_core.embed(m, c.test.x[idx], c.test.y[idx])
            for q in range(20):
                s = [float(zt[q] @ zi[j]) for j in range(20)]
                rank = sum(1 for j in range(20) if s[j] > s[q] or (s[j] == s[q] and j < q))
                hits.append(rank < 1)
        assert rep.per_client[1][i] == pytest.approx(np.mean(hits), abs=1e-12)
    assert rep.worst[1] <= rep.mean[1] <= max(rep.per_client[1])


def test_report_single_client_and_duplicate():
    clients = _toy_clients()
    m = nn_core.init_model(nn_core.ModelDims(3, 3, 5, 4), 1)
    one = per_client_report(m, clients[:1], (1,), 20, 0)
    assert one.worst[1] == one.mean[1]
    rep = per_client_report(m, clients, (1,), 20, 0)
    best = int(np.argmax(rep.per_client[1]))
    dup = ClientDataset(99, clients[best].train, clients[best].test, clients[best].class_histogram)
    rep2 = per_client_report(m, list(clients) + [dup], (1,), 20, 0)
    assert rep2.worst[1] >= rep.worst[1]


def test_report_deterministic():
    clients = _toy_clients()
    m = nn_core.init_model(nn_core.ModelDims(3, 3, 5, 4), 1)
    assert per_client_report(m, clients, (1, 5), 20, 4).to_dict() == per_client_report(m, clients, (1, 5), 20, 4).to_dict()


def test_pair_similarity_identical_towers():
    m = _identity_model(3)
    x = np.random.default_rng(0).standard_normal((10, 3))
    split = Split(x, x.copy(), np.zeros(10, int), np.arange(10))
    assert pair_similarity(m, split) == pytest.approx(1.0, abs=1e-12)


def test_pair_similarity_range_and_oracle(rng):
    m = nn_core.init_model(nn_core.ModelDims(3, 4, 5, 4), 9)
    split = Split(rng.standard_normal((30, 3)), rng.standard_normal((30, 4)), np.zeros(30, int), np.arange(30))
    value = pair_similarity(m, split)
    zi, zt = nn_core.embed(m, split.x, split.y)
    naive = sum(sum(a * b for a, b in zip(zi[i], zt[i])) for i in range(30)) / 30
    assert -1 <= value <= 1
    assert value == pytest.approx(naive, abs=1e-12)
    sampled = pair_similarity(m, split, batches=3, batch_size=8, rng=np.random.default_rng(0))
    assert -1 <= sampled <= 1


def test_distortion_zero_cases():
    clients = _toy_clients()
    m = nn_core.init_model(nn_core.ModelDims(3, 3, 5, 4), 1)
    for steps, lr in ((0, 0.5), (10, 0.0)):
        table = distortion_probe(m, clients, steps, lr, 0.1)
        assert np.all(table.drops == 0)
        assert table.avg_row.shape == (2,)


def test_distortion_nonzero_after_training():
    clients = _toy_clients()
    m = nn_core.init_model(nn_core.ModelDims(3, 3, 5, 4), 1)
    table = distortion_probe(m, clients, 20, 0.5, 0.1, batch_size=8)
    assert table.drops.shape == (2, 2)
    assert np.any(table.drops != 0)
    assert table.mean_drop == pytest.approx(table.drops.mean())
