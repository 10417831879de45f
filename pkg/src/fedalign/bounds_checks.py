"""Numerical checks of the contrastive-loss bound, the five-term distance
decomposition and the Lipschitz triangle chain.

Asserted forms are the ones that follow from elementary inequalities; the
loss bound that depends on the batch constants ``l``/``L`` is evaluated and
its violation rate reported, not asserted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dro_weights import check_simplex
from .losses import info_nce_one_way

SLACK_TOL = 1e-9


@dataclass
class BoundsReport:
    lhs: float
    rhs: float
    satisfied: bool
    slack: float
    diagnostics: dict = field(default_factory=dict)

    @classmethod
    def of(cls, lhs: float, rhs: float, **diagnostics) -> "BoundsReport":
        return cls(float(lhs), float(rhs), bool(lhs <= rhs + SLACK_TOL), float(rhs - lhs), diagnostics)


def _check_unit_rows(z: np.ndarray, name: str) -> None:
    norms = np.linalg.norm(z, axis=1)
    if not np.allclose(norms, 1.0, atol=1e-8):
        raise ValueError(f"rows of {name} must be unit-normalised")


def loss_bound_check(Zx: np.ndarray, Zy: np.ndarray, tau: float) -> tuple[BoundsReport, BoundsReport]:
    """(weak bound, l/L bound) for the one-directional contrastive loss.

    Weak bound: ``log(bz) + D_max^2 / (2 tau)`` with ``D_max^2`` the largest
    positive-pair squared distance. The l/L bound is
    ``log(bz) + L^2 (1 - l^2) / (2 tau) * Dbar^2`` with ``Dbar`` the mean
    positive-pair distance, ``l = min d_ii / D_max`` and
    ``L = max(1, D_max / Dbar)``.
    """
    Zx = np.asarray(Zx, dtype=np.float64)
    Zy = np.asarray(Zy, dtype=np.float64)
    if Zx.shape != Zy.shape or Zx.ndim != 2 or Zx.shape[0] < 1:
        raise ValueError("need two equally shaped non-empty batches")
    _check_unit_rows(Zx, "Zx")
    _check_unit_rows(Zy, "Zy")
    bz = Zx.shape[0]
    lhs = info_nce_one_way(Zx, Zy, tau)
    d = np.linalg.norm(Zx - Zy, axis=1)
    d_max = float(d.max())
    d_bar = float(d.mean())
    if d_max > 0:
        l_ = float(d.min() / d_max)
        L_ = max(1.0, d_max / d_bar)
    else:
        l_, L_ = 1.0, 1.0
    alpha = L_**2 * (1.0 - l_**2) / (2.0 * tau)
    diag = {"bz": bz, "tau": tau, "D_max": d_max, "D_bar": d_bar, "l": l_, "L": L_, "alpha": alpha}
    weak = BoundsReport.of(lhs, math.log(bz) + d_max**2 / (2.0 * tau), **diag)
    constant = BoundsReport.of(lhs, math.log(bz) + alpha * d_bar**2, **diag)
    return weak, constant


@dataclass
class DomainInstance:
    """Linear encoders and paired samples of one domain.

    ``img`` holds the global, local-hat and local image maps (applied as
    ``x @ A.T``); ``txt`` the text analogues.
    """

    img: tuple[np.ndarray, np.ndarray, np.ndarray]
    txt: tuple[np.ndarray, np.ndarray, np.ndarray]
    x: np.ndarray
    y: np.ndarray


def _sq(a: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", a, a)


def decomposition_check(domains: Sequence[DomainInstance], w) -> BoundsReport:
    """Per-sample check of the five-term squared-distance decomposition,
    aggregated over the mixture ``sum_i w_i D_i``."""
    w = check_simplex(w)
    if len(domains) != w.size:
        raise ValueError("one weight per domain required")
    lhs_total = 0.0
    rhs_total = 0.0
    violations = 0
    worst = -math.inf
    n_samples = 0
    c_terms = []
    for wi, dom in zip(w, domains):
        g_img, h_img, l_img = (dom.x @ A.T for A in dom.img)
        g_txt, h_txt, l_txt = (dom.y @ B.T for B in dom.txt)
        lhs = _sq(g_img - g_txt)
        terms = [
            _sq(g_img - h_img),
            _sq(h_img - l_img),
            _sq(l_img - l_txt),
            _sq(l_txt - h_txt),
            _sq(h_txt - g_txt),
        ]
        rhs = 5.0 * np.sum(terms, axis=0)
        gap = lhs - rhs
        violations += int(np.sum(gap > SLACK_TOL * np.maximum(1.0, rhs)))
        worst = max(worst, float(gap.max()))
        n_samples += lhs.size
        c_terms.append(float(terms[2].mean()))
        lhs_total += wi * float(lhs.mean())
        rhs_total += wi * float(rhs.mean())
    report = BoundsReport.of(lhs_total, rhs_total, sample_violations=violations, max_sample_gap=worst, n_samples=n_samples, C=c_terms)
    report.satisfied = report.satisfied and violations == 0
    return report


def chain_check(z_I, z_T, z_I_star, z_T_star) -> BoundsReport:
    """Triangle chain for the 1-Lipschitz surrogate ``L(a, b) = ||a - b||``.

    Asserts ``||z*_I - z*_T|| <= ||z_I - z_T|| + ||z_I - z*_I|| + ||z_T - z*_T||``
    per sample and also reports the squared-norm variant.
    """
    z_I, z_T, z_Is, z_Ts = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (z_I, z_T, z_I_star, z_T_star))
    lhs = np.linalg.norm(z_Is - z_Ts, axis=1)
    task = np.linalg.norm(z_I - z_T, axis=1)
    dI = np.linalg.norm(z_I - z_Is, axis=1)
    dT = np.linalg.norm(z_T - z_Ts, axis=1)
    rhs = task + dI + dT
    rhs_sq = task + dI**2 + dT**2
    gap = lhs - rhs
    violations = int(np.sum(gap > SLACK_TOL))
    sq_violations = int(np.sum(lhs - rhs_sq > SLACK_TOL))
    report = BoundsReport.of(
        float(lhs.mean()),
        float(rhs.mean()),
        sample_violations=violations,
        max_sample_gap=float(gap.max()),
        squared_form_violations=sq_violations,
        n_samples=int(lhs.size),
    )
    report.satisfied = violations == 0
    return report


def _unit(rng, n, d):
    z = rng.standard_normal((n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def loss_bound_sweep(seed: int, n: int = 1000, batch_sizes=(2, 8, 32), dim: int = 8) -> dict:
    rng = np.random.default_rng([seed, 1])
    weak_viol = constant_viol = 0
    worst_weak = -math.inf
    worst_constant = -math.inf
    for i in range(n):
        bz = batch_sizes[i % len(batch_sizes)]
        tau = float(rng.uniform(0.05, 2.0))
        Zx = _unit(rng, bz, dim)
        # mix of well-aligned and random partners
        mix = float(rng.uniform(0, 1))
        Zy = Zx * mix + (1 - mix) * _unit(rng, bz, dim)
        Zy /= np.linalg.norm(Zy, axis=1, keepdims=True)
        weak, constant = loss_bound_check(Zx, Zy, tau)
        weak_viol += not weak.satisfied
        constant_viol += not constant.satisfied
        worst_weak = max(worst_weak, -weak.slack)
        worst_constant = max(worst_constant, -constant.slack)
    return {
        "instances": n,
        "batch_sizes": list(batch_sizes),
        "weak_violations": weak_viol,
        "weak_max_violation": max(worst_weak, 0.0),
        "constant_form_violations": constant_viol,
        "constant_form_violation_rate": constant_viol / n,
        "constant_form_max_violation": max(worst_constant, 0.0),
    }


def random_domains(
    rng: np.random.Generator,
    n_domains: int,
    d_in: int = 4,
    d_out: int = 3,
    n: int = 16,
    spread: Optional[float] = None,
) -> list[DomainInstance]:
    """Random linear instances; with ``spread`` all six maps are small
    perturbations of one base map and ``y`` is a perturbation of ``x``."""
    doms = []
    for _ in range(n_domains):
        x = rng.standard_normal((n, d_in))
        if spread is None:
            mats = [rng.standard_normal((d_out, d_in)) for _ in range(6)]
            y = rng.standard_normal((n, d_in))
        else:
            base = rng.standard_normal((d_out, d_in))
            mats = [base + spread * rng.standard_normal((d_out, d_in)) for _ in range(6)]
            y = x + spread * rng.standard_normal((n, d_in))
        doms.append(DomainInstance(tuple(mats[:3]), tuple(mats[3:]), x, y))
    return doms


def decomposition_sweep(seed: int, n: int = 1000) -> dict:
    rng = np.random.default_rng([seed, 2])
    violations = 0
    sample_violations = 0
    worst = -math.inf
    for _ in range(n):
        k = int(rng.integers(1, 5))
        spread = None if rng.uniform() < 0.5 else float(10 ** rng.uniform(-4, 0))
        doms = random_domains(rng, k, spread=spread)
        w = rng.dirichlet(np.ones(k))
        rep = decomposition_check(doms, w)
        violations += not rep.satisfied
        sample_violations += rep.diagnostics["sample_violations"]
        worst = max(worst, rep.diagnostics["max_sample_gap"])
    return {"instances": n, "violations": violations, "sample_violations": sample_violations, "max_sample_gap": worst}


def chain_sweep(seed: int, n: int = 1000, dim: int = 8) -> dict:
    rng = np.random.default_rng([seed, 3])
    z = [_unit(rng, n, dim) for _ in range(4)]
    # half the draws put the anchors close to the local embeddings
    close = rng.uniform(size=n) < 0.5
    z[2][close] = z[0][close] + 0.05 * rng.standard_normal((int(close.sum()), dim))
    z[3][close] = z[1][close] + 0.05 * rng.standard_normal((int(close.sum()), dim))
    rep = chain_check(*z)
    return {
        "instances": n,
        "violations": rep.diagnostics["sample_violations"],
        "max_gap": rep.diagnostics["max_sample_gap"],
        "squared_form_violations": rep.diagnostics["squared_form_violations"],
    }


def run_all(seed: int, n: int = 1000) -> dict:
    loss_b = loss_bound_sweep(seed, n)
    prop = decomposition_sweep(seed, n)
    chain = chain_sweep(seed, n)
    asserted = loss_b["weak_violations"] + prop["violations"] + chain["violations"]
    return {
        "seed": seed,
        "loss_bound": loss_b,
        "decomposition": prop,
        "triangle_chain": chain,
        "asserted_violations": asserted,
        "ok": asserted == 0,
    }
