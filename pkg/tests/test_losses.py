import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedalign import nn_core
from fedalign.losses import Hyper, dro_loss, guidance_l2, info_nce, local_loss
from fedalign.nn_core import ShapeError

from conftest import central_fd, rel_error, unit_rows
from gradcheck import CHECKS


def _softmax_oracle(Zx, Zy, tau):
    """Direct evaluation of both directions with explicit sums."""
    bz = Zx.shape[0]
    total = 0.0
    for a, b in ((Zx, Zy), (Zy, Zx)):
        for i in range(bz):
            logits = [float(a[i] @ b[j]) / tau for j in range(bz)]
            denom = sum(math.exp(l) for l in logits)
            total += -math.log(math.exp(logits[i]) / denom)
    return 0.5 * total / bz


def test_info_nce_single_row_is_zero(rng):
    z = unit_rows(rng, 1, 4)
    out = info_nce(z, unit_rows(rng, 1, 4), 0.1)
    assert out.value == 0.0


def test_info_nce_identical_rows_is_log_bz():
    z = np.tile([[0.6, 0.8]], (7, 1))
    assert info_nce(z, z, 0.3).value == pytest.approx(math.log(7), abs=1e-12)


def test_info_nce_identity_rows():
    eye = np.eye(2)
    expected = math.log(1 + math.exp(-1))
    assert info_nce(eye, eye, 1.0).value == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.31326, abs=1e-5)


def test_info_nce_matches_oracle(rng):
    Zx, Zy = unit_rows(rng, 6, 3), unit_rows(rng, 6, 3)
    assert info_nce(Zx, Zy, 0.2).value == pytest.approx(_softmax_oracle(Zx, Zy, 0.2), abs=1e-12)


def test_info_nce_errors(rng):
    z = unit_rows(rng, 3, 2)
    with pytest.raises(ValueError):
        info_nce(z, z, 0.0)
    with pytest.raises(ValueError):
        info_nce(np.zeros((0, 2)), np.zeros((0, 2)), 0.1)
    with pytest.raises(ShapeError):
        info_nce(z, unit_rows(rng, 4, 2), 0.1)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), bz=st.integers(1, 12), tau=st.floats(0.01, 10.0))
def test_info_nce_properties(seed, bz, tau):
    rng = np.random.default_rng(seed)
    Zx, Zy = unit_rows(rng, bz, 5), unit_rows(rng, bz, 5)
    a = info_nce(Zx, Zy, tau).value
    assert math.isfinite(a)
    assert a == info_nce(Zy, Zx, tau).value
    if bz >= 2:
        assert a > 0
    perm = rng.permutation(bz)
    assert abs(info_nce(Zx[perm], Zy[perm], tau).value - a) < 1e-12


def test_info_nce_embedding_gradient(rng):
    Zx, Zy = unit_rows(rng, 5, 3), unit_rows(rng, 5, 3)
    out = info_nce(Zx, Zy, 0.4)
    fx = central_fd(lambda v: info_nce(v.reshape(5, 3), Zy, 0.4).value, Zx.ravel().copy())
    fy = central_fd(lambda v: info_nce(Zx, v.reshape(5, 3), 0.4).value, Zy.ravel().copy())
    assert rel_error(out.grad_zI.ravel(), fx) < 1e-6
    assert rel_error(out.grad_zT.ravel(), fy) < 1e-6


def test_guidance_examples(rng):
    z = rng.standard_normal((3, 4))
    assert guidance_l2(z, z).value == 0.0
    assert guidance_l2(np.array([[1.0, 1.0]]), np.zeros((1, 2))).value == 2.0
    a, b = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    naive = sum((a[i, j] - b[i, j]) ** 2 for i in range(4) for j in range(3))
    out = guidance_l2(a, b)
    assert out.value == pytest.approx(naive, abs=1e-12)
    assert np.allclose(out.grads[0], 2 * (a - b))
    with pytest.raises(ShapeError):
        guidance_l2(a, b[:3])


def _caches(dims, seeds, x, y):
    return [nn_core.forward(nn_core.init_model(dims, s), x, y) for s in seeds]


def test_local_loss_components(tiny_dims, rng):
    x, y = rng.standard_normal((5, 4)), rng.standard_normal((5, 3))
    local, anchor = _caches(tiny_dims, (1, 2), x, y)
    h = Hyper(tau=0.3, alpha=0.0, beta=0.0)
    guide = guidance_l2(local.z_I, anchor.z_I).value + guidance_l2(local.z_T, anchor.z_T).value
    assert local_loss(local, anchor, h).value == pytest.approx(guide, abs=1e-12)

    h = Hyper(tau=0.3, alpha=1.7)
    same = local_loss(local, local, h)
    assert same.value == pytest.approx(1.7 * info_nce(local.z_I, local.z_T, 0.3).value, abs=1e-12)

    full = local_loss(local, anchor, h).value
    assert full == pytest.approx(guide + 1.7 * info_nce(local.z_I, local.z_T, 0.3).value, abs=1e-12)


def test_dro_loss_components(rng):
    mats = [unit_rows(rng, 6, 4) for _ in range(6)]
    h = Hyper(tau=0.25, alpha=1.0, beta=1.5)
    out = dro_loss(*mats, h)
    l2 = np.sum((mats[0] - mats[2]) ** 2) + np.sum((mats[1] - mats[3]) ** 2)
    expected = 1.5 * l2 + _softmax_oracle(mats[0], mats[1], 0.25) + _softmax_oracle(mats[4], mats[5], 0.25)
    assert out.value == pytest.approx(expected, abs=1e-12)
    assert len(out.grads) == 6

    # untrained copy: beta term vanishes
    same = dro_loss(mats[0], mats[1], mats[0], mats[1], mats[4], mats[5], h)
    assert same.value == pytest.approx(info_nce(mats[0], mats[1], 0.25).value + info_nce(mats[4], mats[5], 0.25).value, abs=1e-12)

    # all three pairs coincide
    h0 = Hyper(tau=0.25, beta=0.0)
    coincide = dro_loss(mats[0], mats[1], mats[0], mats[1], mats[0], mats[1], h0)
    assert coincide.value == pytest.approx(2 * info_nce(mats[0], mats[1], 0.25).value, abs=1e-12)


def test_dro_loss_embedding_gradients(rng):
    mats = [unit_rows(rng, 4, 3) for _ in range(6)]
    h = Hyper(tau=0.5, beta=0.7)
    out = dro_loss(*mats, h)
    for slot in range(6):
        def f(v, slot=slot):
            ms = list(mats)
            ms[slot] = v.reshape(4, 3)
            return dro_loss(*ms, h).value

        fd = central_fd(f, mats[slot].ravel().copy())
        assert rel_error(out.grads[slot].ravel(), fd) < 1e-6


def test_hyper_validation():
    with pytest.raises(ValueError):
        Hyper(tau=0)
    with pytest.raises(ValueError):
        Hyper(alpha=-1)


@pytest.mark.parametrize("name", sorted(CHECKS))
@pytest.mark.parametrize("seed", range(3))
def test_network_gradients(name, seed):
    assert CHECKS[name](seed) < 1e-4
