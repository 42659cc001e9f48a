"""Bottleneck adapters and their placement variants around a layernorm site.

A site pairs one layernorm with one sublayer (attention or MLP). The five
routing variants:

  sequential_sublayer  sublayer(LN(x)) then adapter in series behind it
  sequential_ln        adapter in series behind the layernorm
  parallel_sublayer    adapter spans the layernorm and sublayer in parallel
  parallel_ln          adapter in parallel with the layernorm only (headline)
  ln_tuning            no adapter; the layernorm gain/bias are the trainables

The parallel_ln form reads the pre-normalization input, so it can react to
components that standardization annihilates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigurationError, ShapeError
from .tensor import (
    ParamTensor,
    activation,
    activation_backward,
    flat_weight_grad,
    layer_norm,
    layer_norm_backward,
)

PLACEMENTS = (
    "parallel_ln",
    "sequential_ln",
    "parallel_sublayer",
    "sequential_sublayer",
    "ln_tuning",
)


@dataclass
class AdapterBlock:
    """Down-project, nonlinearity, up-project, with a learnable output scale."""

    w_down: ParamTensor
    w_up: ParamTensor
    s: ParamTensor
    activation: str = "relu"

    def __post_init__(self):
        d, m = self.w_down.shape
        if m >= d:
            raise ConfigurationError(f"bottleneck {m} must be smaller than width {d}")
        if self.w_up.shape != (m, d):
            raise ShapeError(f"up projection must be {m}x{d}, got {self.w_up.shape}")


@dataclass
class LayerNormParams:
    gain: ParamTensor
    bias: ParamTensor
    eps: float = 1e-5


@dataclass
class AdapterPlacement:
    kind: str = "parallel_ln"

    def __post_init__(self):
        if self.kind not in PLACEMENTS:
            raise ConfigurationError(f"unknown placement {self.kind!r}")


# ---------------------------------------------------------------------------
# adapter core


def adapter_forward_fwd(x: np.ndarray, a: AdapterBlock):
    pre = x @ a.w_down.value
    act = activation(a.activation, pre)
    return act @ a.w_up.value, (x, pre, act)


def adapter_forward_bwd(g: np.ndarray, cache, a: AdapterBlock) -> np.ndarray:
    x, pre, act = cache
    a.w_up.add_grad(flat_weight_grad(act, g))
    dpre = activation_backward(a.activation, pre, g @ a.w_up.value.T)
    a.w_down.add_grad(flat_weight_grad(x, dpre))
    return dpre @ a.w_down.value.T


def adapter_forward(x: np.ndarray, a: AdapterBlock) -> np.ndarray:
    """Core transform f(x W_down) W_up, without residual or scale."""
    y, _ = adapter_forward_fwd(x, a)
    return y


def _scaled_adapter_fwd(x: np.ndarray, a: AdapterBlock):
    raw, core = adapter_forward_fwd(x, a)
    return float(a.s.value) * raw, (raw, core)


def _scaled_adapter_bwd(g: np.ndarray, cache, a: AdapterBlock) -> np.ndarray:
    raw, core = cache
    a.s.add_grad(np.array(np.sum(g * raw)))
    return adapter_forward_bwd(float(a.s.value) * g, core, a)


# ---------------------------------------------------------------------------
# layernorm wrappers on ParamTensors


def ln_fwd(x: np.ndarray, ln: LayerNormParams):
    return layer_norm(x, ln.gain.value, ln.bias.value, ln.eps), x


def ln_bwd(g: np.ndarray, x: np.ndarray, ln: LayerNormParams) -> np.ndarray:
    dx, dgain, dbias = layer_norm_backward(g, x, ln.gain.value, ln.eps)
    ln.gain.add_grad(dgain)
    ln.bias.add_grad(dbias)
    return dx


def l_adapter(x: np.ndarray, ln: LayerNormParams, a: AdapterBlock) -> np.ndarray:
    """LayerNorm(x) + s * Adapter(x): nonlinear adjustment of the normalized
    distribution, fed by the pre-normalization input."""
    y, _ = l_adapter_fwd(x, ln, a)
    return y


def l_adapter_fwd(x: np.ndarray, ln: LayerNormParams, a: AdapterBlock):
    norm, _ = ln_fwd(x, ln)
    scaled, ad_cache = _scaled_adapter_fwd(x, a)
    return norm + scaled, (x, ad_cache)


def l_adapter_bwd(g: np.ndarray, cache, ln: LayerNormParams, a: AdapterBlock) -> np.ndarray:
    x, ad_cache = cache
    return ln_bwd(g, x, ln) + _scaled_adapter_bwd(g, ad_cache, a)


# ---------------------------------------------------------------------------
# placement routing

SubFwd = Callable[[np.ndarray], tuple[np.ndarray, object]]
SubBwd = Callable[[np.ndarray, object], np.ndarray]


def placement_fwd(
    x: np.ndarray,
    sub_fwd: SubFwd,
    ln: LayerNormParams,
    a: AdapterBlock | None,
    placement: AdapterPlacement,
):
    """Route one site (layernorm + sublayer) through the selected variant.

    Returns the sublayer-path output without the residual connection, which
    the surrounding block supplies.
    """
    kind = placement.kind
    if a is None and kind != "ln_tuning":
        raise ConfigurationError(f"placement {kind!r} needs an adapter block")

    if kind == "ln_tuning":
        norm, _ = ln_fwd(x, ln)
        y, sub_cache = sub_fwd(norm)
        return y, (kind, x, sub_cache, None)

    if kind == "sequential_sublayer":
        norm, _ = ln_fwd(x, ln)
        u, sub_cache = sub_fwd(norm)
        scaled, ad_cache = _scaled_adapter_fwd(u, a)
        return u + scaled, (kind, x, sub_cache, ad_cache)

    if kind == "sequential_ln":
        norm, _ = ln_fwd(x, ln)
        scaled, ad_cache = _scaled_adapter_fwd(norm, a)
        y, sub_cache = sub_fwd(norm + scaled)
        return y, (kind, x, sub_cache, ad_cache)

    if kind == "parallel_sublayer":
        norm, _ = ln_fwd(x, ln)
        y, sub_cache = sub_fwd(norm)
        scaled, ad_cache = _scaled_adapter_fwd(x, a)
        return y + scaled, (kind, x, sub_cache, ad_cache)

    # parallel_ln
    t, la_cache = l_adapter_fwd(x, ln, a)
    y, sub_cache = sub_fwd(t)
    return y, (kind, x, sub_cache, la_cache)


def placement_bwd(
    g: np.ndarray,
    cache,
    sub_bwd: SubBwd,
    ln: LayerNormParams,
    a: AdapterBlock | None,
) -> np.ndarray:
    kind, x, sub_cache, ad_cache = cache

    if kind == "ln_tuning":
        dnorm = sub_bwd(g, sub_cache)
        return ln_bwd(dnorm, x, ln)

    if kind == "sequential_sublayer":
        du = g + _scaled_adapter_bwd(g, ad_cache, a)
        dnorm = sub_bwd(du, sub_cache)
        return ln_bwd(dnorm, x, ln)

    if kind == "sequential_ln":
        dv2 = sub_bwd(g, sub_cache)
        dnorm = dv2 + _scaled_adapter_bwd(dv2, ad_cache, a)
        return ln_bwd(dnorm, x, ln)

    if kind == "parallel_sublayer":
        dnorm = sub_bwd(g, sub_cache)
        return ln_bwd(dnorm, x, ln) + _scaled_adapter_bwd(g, ad_cache, a)

    # parallel_ln
    dt = sub_bwd(g, sub_cache)
    return l_adapter_bwd(dt, ad_cache, ln, a)


def apply_placement(
    site_input: np.ndarray,
    sublayer: Callable[[np.ndarray], np.ndarray],
    ln: LayerNormParams,
    a: AdapterBlock | None,
    placement: AdapterPlacement,
) -> np.ndarray:
    """Forward-only routing with a plain callable sublayer."""
    y, _ = placement_fwd(site_input, lambda z: (sublayer(z), None), ln, a, placement)
    return y
