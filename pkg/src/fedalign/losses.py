"""Training objectives in embedding space.

Every loss returns its value together with gradients w.r.t. the embedding
matrices it consumed; ``nn_core.backward`` carries them into parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn_core import ForwardCache, ShapeError


@dataclass(frozen=True)
class Hyper:
    tau: float = 0.1
    alpha: float = 1.0
    beta: float = 2.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")


@dataclass
class LossOutput:
    value: float
    grads: tuple[np.ndarray, ...]

    @property
    def grad_zI(self) -> np.ndarray:
        return self.grads[0]

    @property
    def grad_zT(self) -> np.ndarray:
        return self.grads[1]


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ShapeError("embeddings must be 2-d")


def _log_softmax_rows(s: np.ndarray) -> np.ndarray:
    m = s.max(axis=1, keepdims=True)
    shifted = s - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def info_nce(Zx: np.ndarray, Zy: np.ndarray, tau: float) -> LossOutput:
    """Symmetric InfoNCE with equal weight on the x->y and y->x directions."""
    Zx = np.asarray(Zx, dtype=np.float64)
    Zy = np.asarray(Zy, dtype=np.float64)
    _check_pair(Zx, Zy)
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    bz = Zx.shape[0]
    if bz == 0:
        raise ValueError("empty batch")
    # einsum + contiguous transpose: swapping the arguments reproduces the
    # same floating-point operations, so the loss is exactly symmetric
    s = np.einsum("ik,jk->ij", Zx, Zy) / tau
    log_p_rows = _log_softmax_rows(s)
    log_p_cols = _log_softmax_rows(np.ascontiguousarray(s.T))
    value = -0.5 * (np.trace(log_p_rows) + np.trace(log_p_cols)) / bz
    eye = np.eye(bz)
    d_s = 0.5 * (np.exp(log_p_rows) - eye) / bz + 0.5 * (np.exp(log_p_cols) - eye).T / bz
    grad_x = d_s @ Zy / tau
    grad_y = d_s.T @ Zx / tau
    # + 0.0 folds a -0.0 from the bz == 1 case
    return LossOutput(float(value) + 0.0, (grad_x, grad_y))


def info_nce_one_way(Zx: np.ndarray, Zy: np.ndarray, tau: float) -> float:
    """Mean of -log softmax over each row of Zx against all rows of Zy."""
    s = (np.asarray(Zx) @ np.asarray(Zy).T) / tau
    return float(-np.trace(_log_softmax_rows(s)) / s.shape[0])


def guidance_l2(Z: np.ndarray, Z_anchor: np.ndarray) -> LossOutput:
    """Un-normalised sum of squared differences; anchors receive no gradient."""
    Z = np.asarray(Z, dtype=np.float64)
    Z_anchor = np.asarray(Z_anchor, dtype=np.float64)
    _check_pair(Z, Z_anchor)
    diff = Z - Z_anchor
    return LossOutput(float(np.sum(diff * diff)), (2.0 * diff,))


def local_loss(cache_local: ForwardCache, cache_anchor: ForwardCache, hyper: Hyper) -> LossOutput:
    """Guided local objective: L2 to the frozen anchor embeddings plus alpha * InfoNCE."""
    g_img = guidance_l2(cache_local.z_I, cache_anchor.z_I)
    g_txt = guidance_l2(cache_local.z_T, cache_anchor.z_T)
    task = info_nce(cache_local.z_I, cache_local.z_T, hyper.tau)
    value = g_img.value + g_txt.value + hyper.alpha * task.value
    grad_I = g_img.grads[0] + hyper.alpha * task.grad_zI
    grad_T = g_txt.grads[0] + hyper.alpha * task.grad_zT
    return LossOutput(value, (grad_I, grad_T))


def dro_loss(
    z_clean_I: np.ndarray,
    z_clean_T: np.ndarray,
    z_copy_I: np.ndarray,
    z_copy_T: np.ndarray,
    z_local_I: np.ndarray,
    z_local_T: np.ndarray,
    hyper: Hyper,
) -> LossOutput:
    """Teacher-aligner objective.

    ``z_clean``: teacher aligner over the frozen aggregated encoder.
    ``z_copy``: teacher aligner over the learnable encoder copy.
    ``z_local``: frozen local aligner over the learnable encoder copy.

    Gradients are returned in the argument order; routing them to parameters
    is the caller's job.
    """
    mats = [np.asarray(m, dtype=np.float64) for m in (z_clean_I, z_clean_T, z_copy_I, z_copy_T, z_local_I, z_local_T)]
    for m in mats[1:]:
        _check_pair(mats[0], m)
    c_I, c_T, p_I, p_T, l_I, l_T = mats
    diff_I = c_I - p_I
    diff_T = c_T - p_T
    l2 = float(np.sum(diff_I * diff_I) + np.sum(diff_T * diff_T))
    cl = info_nce(c_I, c_T, hyper.tau)
    task = info_nce(l_I, l_T, hyper.tau)
    b = hyper.beta
    grads = (
        2.0 * b * diff_I + cl.grad_zI,
        2.0 * b * diff_T + cl.grad_zT,
        -2.0 * b * diff_I,
        -2.0 * b * diff_T,
        task.grad_zI,
        task.grad_zT,
    )
    return LossOutput(b * l2 + cl.value + task.value, grads)
