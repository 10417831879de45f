"""Client weights for the worst-case mixture objective.

Weights live on the probability simplex and are restricted to the chi-square
ball ``(1/N) * sum((N w_i - 1)^2) <= rho`` around uniform weighting. Each
round the server takes one exponentiated-gradient ascent step on the client
losses and pulls the result back into the ball.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SIMPLEX_TOL = 1e-6


def _as_weights(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("weights must be a non-empty vector")
    return w


def check_simplex(w, tol: float = SIMPLEX_TOL) -> np.ndarray:
    w = _as_weights(w)
    if np.any(w < -tol) or abs(w.sum() - 1.0) > tol:
        raise ValueError(f"weights are not on the simplex (min={w.min():.3g}, sum={w.sum():.12g})")
    return w


def chi_square_div(w) -> float:
    w = check_simplex(w)
    n = w.size
    return float(np.sum((n * w - 1.0) ** 2) / n)


def mirror_step(w, v, gamma: float) -> np.ndarray:
    """Multiplicative-weights update ``w_i exp(gamma v_i)``, renormalised."""
    w = _as_weights(w)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != w.shape:
        raise ValueError("loss vector and weights differ in length")
    logits = gamma * v
    logits = logits - logits.max()
    out = w * np.exp(logits)
    return out / out.sum()


def blend_closed_form(w, rho: float) -> float:
    """Blend fraction toward uniform that lands exactly on the ball boundary."""
    div = chi_square_div(w)
    if div <= rho:
        return 0.0
    return 1.0 - math.sqrt(rho / div)


def project_to_ball(w, rho: float, tol: float = 1e-10, max_iter: int = 200) -> np.ndarray:
    """Blend ``w`` toward uniform just enough to satisfy the divergence bound.

    The smallest feasible blend fraction is found by bisection on
    ``div((1 - t) w + t u) <= rho``. Bisection stops once the feasible end is
    within ``tol`` of the boundary *and* the bracket is narrower than 1e-13;
    the bracket condition matters for tiny radii, where a divergence gap of
    1e-10 still leaves the blend fraction loose.
    """
    if rho < 0:
        raise ValueError(f"rho must be >= 0, got {rho}")
    w = check_simplex(w)
    div0 = chi_square_div(w)
    if div0 <= rho:
        return w.copy()
    n = w.size
    uniform = np.full(n, 1.0 / n)

    def div_at(t: float) -> float:
        return chi_square_div((1.0 - t) * w + t * uniform)

    lo, hi = 0.0, 1.0
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        d = div_at(mid)
        if d <= rho:
            hi = mid
            if rho - d <= tol and hi - lo <= 1e-13:
                break
        else:
            lo = mid
    out = (1.0 - hi) * w + hi * uniform
    # exact renormalisation keeps the sum at 1 to rounding
    return out / out.sum()


@dataclass
class DroState:
    w: np.ndarray
    rho: float = 1.0
    gamma: float = 0.5
    history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.w = check_simplex(self.w).copy()
        if self.rho < 0 or self.gamma < 0:
            raise ValueError("rho and gamma must be >= 0")

    @classmethod
    def uniform(cls, n: int, rho: float = 1.0, gamma: float = 0.5) -> "DroState":
        return cls(np.full(n, 1.0 / n), rho, gamma)

    def update(self, v) -> np.ndarray:
        stepped = mirror_step(self.w, v, self.gamma)
        self.w = project_to_ball(stepped, self.rho) if math.isfinite(self.rho) else stepped
        self.history.append(self.w.copy())
        return self.w

    def divergence(self) -> float:
        return chi_square_div(self.w)
