"""Dense float64 tensor math with explicit paired backward operations.

Every forward op used by the model has a hand-written backward companion
(no taping framework); ``check_gradient`` is the central-difference oracle
that validates the pairing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
from scipy.special import erf

from .errors import OracleInvalidError, ShapeError

INV_SQRT2 = 1.0 / np.sqrt(2.0)
INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def as_tensor(data) -> np.ndarray:
    """Coerce to a C-contiguous float64 array (0-d stays 0-d)."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr.copy() if arr is data else arr


class ParamTensor:
    """A value array with a same-shape gradient accumulator and a trainable flag.

    Gradient accumulation is a no-op while ``trainable`` is False, so frozen
    tensors keep an identically zero gradient across a training step.
    """

    __slots__ = ("name", "value", "grad", "trainable")

    def __init__(self, value, trainable: bool = True, name: str = ""):
        self.value = as_tensor(value)
        self.grad = np.zeros_like(self.value)
        self.trainable = bool(trainable)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def add_grad(self, g: np.ndarray) -> None:
        if not self.trainable:
            return
        if g.shape != self.value.shape:
            raise ShapeError(f"gradient shape {g.shape} != value shape {self.value.shape}")
        self.grad += g

    def __repr__(self) -> str:
        flag = "trainable" if self.trainable else "frozen"
        return f"ParamTensor({self.name or '<anon>'}, shape={self.value.shape}, {flag})"


# ---------------------------------------------------------------------------
# matmul


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def matmul_backward(g: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Gradients of sum(G * (A @ B)) wrt A and B."""
    return g @ b.T, a.T @ g


def flat_weight_grad(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """dW for y = x @ W with any leading dims summed out."""
    return x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])


def lead_sum(a: np.ndarray, keep: int) -> np.ndarray:
    """Sum out all leading axes, keeping the trailing ``keep`` axes."""
    extra = a.ndim - keep
    return a.sum(axis=tuple(range(extra))) if extra > 0 else a


# ---------------------------------------------------------------------------
# softmax


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by row-max subtraction.

    Entries of -inf are legal (masked logits) as long as each row keeps at
    least one finite entry; they come out exactly zero.
    """
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_rows_backward(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Backward through row softmax given its output ``p`` and upstream ``g``."""
    dot = np.sum(p * g, axis=-1, keepdims=True)
    return p * (g - dot)


# ---------------------------------------------------------------------------
# layer normalization


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float) -> np.ndarray:
    """Per-row standardization followed by the affine gain/bias map."""
    mu = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=-1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    return gain * xhat + bias


def layer_norm_backward(g: np.ndarray, x: np.ndarray, gain: np.ndarray, eps: float):
    """Gradients wrt x, gain, bias for ``layer_norm``."""
    mu = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv

    dbias = lead_sum(g, 1)
    dgain = lead_sum(g * xhat, 1)
    dxhat = g * gain
    dx = inv * (
        dxhat
        - np.mean(dxhat, axis=-1, keepdims=True)
        - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


# ---------------------------------------------------------------------------
# activations


def activation(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(0.0, x)
    if kind == "gelu":
        return 0.5 * x * (1.0 + erf(x * INV_SQRT2))
    raise ValueError(f"unknown activation kind: {kind!r}")


def activation_backward(kind: str, x: np.ndarray, g: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return g * (x > 0.0)
    if kind == "gelu":
        cdf = 0.5 * (1.0 + erf(x * INV_SQRT2))
        pdf = np.exp(-0.5 * x * x) * INV_SQRT2PI
        return g * (cdf + x * pdf)
    raise ValueError(f"unknown activation kind: {kind!r}")


# ---------------------------------------------------------------------------
# L2 normalization along the last axis (used by both encoder heads)


def l2_normalize(z: np.ndarray) -> np.ndarray:
    return z / np.linalg.norm(z, axis=-1, keepdims=True)


def l2_normalize_backward(g: np.ndarray, z: np.ndarray) -> np.ndarray:
    r = np.linalg.norm(z, axis=-1, keepdims=True)
    y = z / r
    return (g - y * np.sum(y * g, axis=-1, keepdims=True)) / r


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradCheckReport:
    """Per-parameter worst relative error between analytic and FD gradients.

    Frozen parameters are reported as the max absolute analytic gradient,
    which must be identically zero by the trainable-flag contract.
    """

    per_param: dict[str, float]

    @property
    def worst(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    def passes(self, tol: float) -> bool:
        return self.worst < tol


def relative_error(g_analytic: float, g_fd: float) -> float:
    return abs(g_analytic - g_fd) / max(1e-8, abs(g_analytic) + abs(g_fd))


def check_gradient(
    f: Callable[[], float],
    params: Mapping[str, ParamTensor],
    *,
    step: float = 1e-4,
    samples: int = 32,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``f`` must be a deterministic scalar function of the parameter values that
    accumulates analytic gradients into every trainable parameter when called.
    Each tensor is probed on a random subsample of at least ``samples``
    coordinates (all coordinates for smaller tensors).
    """
    rng = rng if rng is not None else np.random.default_rng(0)

    for p in params.values():
        p.zero_grad()
    base = float(f())
    again = float(f())
    if base != again:
        raise OracleInvalidError(f"function is not deterministic: {base!r} != {again!r}")

    # The second call accumulated grads twice; recompute cleanly.
    for p in params.values():
        p.zero_grad()
    f()
    analytic = {name: p.grad.copy() for name, p in params.items()}

    report: dict[str, float] = {}
    for name, p in params.items():
        if not p.trainable:
            report[name] = float(np.max(np.abs(analytic[name]))) if p.size else 0.0
            continue
        flat = p.value.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= samples else rng.choice(n, size=samples, replace=False)
        worst = 0.0
        for i in idx:
            keep = flat[i]
            flat[i] = keep + step
            f_plus = float(f())
            flat[i] = keep - step
            f_minus = float(f())
            flat[i] = keep
            g_fd = (f_plus - f_minus) / (2.0 * step)
            worst = max(worst, relative_error(analytic[name].reshape(-1)[i], g_fd))
        report[name] = worst

    for p in params.values():
        p.zero_grad()
    return GradCheckReport(report)
