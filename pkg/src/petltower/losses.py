"""Similarity-distribution-matching loss (bidirectional row KL between
softmax-normalized similarities and row-normalized match labels) plus the
one-hot contrastive baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, LabelError
from .tensor import softmax_rows, softmax_rows_backward

LOSS_KINDS = ("sdm", "itc", "sdm_plus_itc")


@dataclass
class LossConfig:
    kind: str = "sdm"
    tau: float = 0.02
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.tau <= 0 or self.epsilon <= 0:
            raise ValueError("tau and epsilon must be positive")


def match_probabilities(s: np.ndarray, tau: float) -> np.ndarray:
    """Row softmax of similarities at temperature tau."""
    return softmax_rows(s / tau)


def true_distribution(y: np.ndarray) -> np.ndarray:
    """Row-normalized binary match labels."""
    sums = y.sum(axis=1, keepdims=True)
    if np.any(sums == 0):
        raise LabelError("every row must contain at least one positive label")
    return y / sums


def sdm_loss(p: np.ndarray, q: np.ndarray, epsilon: float, tau: float = 1.0):
    """Row KL(p || q + eps) averaged over rows, with the gradient wrt the
    similarity matrix that produced p (p = row softmax of S / tau)."""
    n = p.shape[0]
    log_ratio = np.log(p) - np.log(q + epsilon)
    loss = float(np.sum(p * log_ratio)) / n
    dp = (log_ratio + 1.0) / n
    ds = softmax_rows_backward(p, dp) / tau
    return loss, ds


def _check_unit_rows(f: np.ndarray, label: str) -> None:
    norms = np.linalg.norm(f, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-8):
        raise ContractError(f"{label} embeddings must be unit-norm")


def bidirectional_sdm_grad(f_v: np.ndarray, f_t: np.ndarray, y: np.ndarray, cfg: LossConfig):
    """Loss plus gradients wrt both embedding matrices."""
    _check_unit_rows(f_v, "image")
    _check_unit_rows(f_t, "text")
    s = f_v @ f_t.T
    loss_i2t, ds1 = sdm_loss(
        match_probabilities(s, cfg.tau), true_distribution(y), cfg.epsilon, cfg.tau
    )
    loss_t2i, ds2 = sdm_loss(
        match_probabilities(s.T, cfg.tau), true_distribution(y.T), cfg.epsilon, cfg.tau
    )
    ds = ds1 + ds2.T
    return loss_i2t + loss_t2i, ds @ f_t, ds.T @ f_v


def bidirectional_sdm(f_v: np.ndarray, f_t: np.ndarray, y: np.ndarray, cfg: LossConfig) -> float:
    """Image-to-text plus text-to-image matching loss, equal weights."""
    loss, _, _ = bidirectional_sdm_grad(f_v, f_t, y, cfg)
    return loss


def itc_loss_grad(f_v: np.ndarray, f_t: np.ndarray, tau: float, labels: np.ndarray | None = None):
    """Symmetric cross-entropy against diagonal targets at temperature tau."""
    _check_unit_rows(f_v, "image")
    _check_unit_rows(f_t, "text")
    n = f_v.shape[0]
    if labels is not None and not np.array_equal(np.asarray(labels, dtype=float), np.eye(n)):
        raise LabelError("one-hot contrastive loss expects diagonal targets")
    s = f_v @ f_t.T
    eye = np.eye(n)

    p1 = softmax_rows(s / tau)
    p2 = softmax_rows(s.T / tau)
    loss = -(np.sum(np.log(np.diag(p1))) + np.sum(np.log(np.diag(p2)))) / n
    ds = ((p1 - eye) + (p2 - eye).T) / (n * tau)
    return loss, ds @ f_t, ds.T @ f_v


def itc_loss(f_v: np.ndarray, f_t: np.ndarray, tau: float, labels: np.ndarray | None = None) -> float:
    loss, _, _ = itc_loss_grad(f_v, f_t, tau, labels)
    return loss


def loss_with_grad(f_v: np.ndarray, f_t: np.ndarray, y: np.ndarray, cfg: LossConfig):
    """Dispatch on the configured loss kind; returns (loss, dF_v, dF_t)."""
    if cfg.kind == "sdm":
        return bidirectional_sdm_grad(f_v, f_t, y, cfg)
    if cfg.kind == "itc":
        return itc_loss_grad(f_v, f_t, cfg.tau)
    loss1, dv1, dt1 = bidirectional_sdm_grad(f_v, f_t, y, cfg)
    loss2, dv2, dt2 = itc_loss_grad(f_v, f_t, cfg.tau)
    return loss1 + loss2, dv1 + dv2, dt1 + dt2
