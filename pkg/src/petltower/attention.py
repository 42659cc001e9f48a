"""Multi-head attention with optional low-rank K/V adaptation and a scaled
key/value prefix.

The prefix mechanism prepends learnable rows to the keys and values, softmax
normalizes over the concatenated logits, then multiplies the prefix columns
of the attention weights by a learnable scalar ``s_p``. Per head this equals

    (1 - lam(x)) * base_attention + s_p * lam(x) * softmax(q @ p_k.T) @ p_v

where ``lam(x)`` is the fraction of attention exp-mass captured by the
prefix columns (the gate). The post-softmax placement of ``s_p`` makes the
gradient of ``p_v`` scale linearly with ``s_p``, which is the whole point:
it counteracts the small gate values that starve vanilla prefix training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ShapeError, StateError
from .tensor import ParamTensor, flat_weight_grad, lead_sum, softmax_rows, softmax_rows_backward


@dataclass
class AttentionWeights:
    """Square projection weights for multi-head attention."""

    w_q: ParamTensor
    w_k: ParamTensor
    w_v: ParamTensor
    w_o: ParamTensor
    heads: int

    def __post_init__(self):
        d = self.w_q.shape[0]
        for w in (self.w_q, self.w_k, self.w_v, self.w_o):
            if w.shape != (d, d):
                raise ShapeError(f"attention weights must all be {d}x{d}, got {w.shape}")
        if self.heads < 1 or d % self.heads != 0:
            raise ConfigurationError(f"width {d} not divisible by heads {self.heads}")

    @property
    def d(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


@dataclass
class LoraPair:
    """Low-rank delta (down @ up, scaled by a learnable scalar) for one weight."""

    w_down: ParamTensor
    w_up: ParamTensor
    s: ParamTensor
    merged: bool = False

    def __post_init__(self):
        d, r = self.w_down.shape
        if r >= d:
            raise ConfigurationError(f"rank {r} must be smaller than width {d}")
        if self.w_up.shape != (r, d):
            raise ShapeError(f"up factor must be {r}x{d}, got {self.w_up.shape}")
        if self.s.size != 1:
            raise ShapeError("scale must be a scalar")

    @property
    def rank(self) -> int:
        return self.w_down.shape[1]


@dataclass
class PrefixBank:
    """Learnable prefix key/value rows plus the attention boost scalar."""

    p_k: ParamTensor | None
    p_v: ParamTensor | None
    s_p: ParamTensor

    @property
    def length(self) -> int:
        return 0 if self.p_k is None else self.p_k.shape[0]


@dataclass
class AttnMask:
    """Masking mode for content-to-content attention.

    Prefix positions stay attendable from every query position regardless
    of kind; causal masking restricts content position i to content
    positions <= i.
    """

    kind: str = "none"

    def __post_init__(self):
        if self.kind not in ("none", "causal"):
            raise ConfigurationError(f"unknown mask kind {self.kind!r}")


EMPTY_PREFIX = PrefixBank(None, None, ParamTensor(np.array(1.0), trainable=False, name="s_p"))


def _content_mask(n: int, mask: AttnMask) -> np.ndarray:
    """Boolean [n x n] matrix of allowed content-to-content attention."""
    if mask.kind == "causal":
        return np.tril(np.ones((n, n), dtype=bool))
    return np.ones((n, n), dtype=bool)


# ---------------------------------------------------------------------------
# LoRA projection


def lora_project_fwd(x: np.ndarray, w: ParamTensor, lora: LoraPair | None):
    """y = x @ W (+ s * x @ down @ up when a pair is attached)."""
    y = x @ w.value
    if lora is None:
        return y, None
    z = x @ lora.w_down.value
    delta = z @ lora.w_up.value
    s = float(lora.s.value)
    return y + s * delta, (z, delta, s)


def lora_project_bwd(g: np.ndarray, x: np.ndarray, w: ParamTensor, lora: LoraPair | None, cache):
    """Backward of ``lora_project_fwd``; accumulates weight grads, returns dx."""
    w.add_grad(flat_weight_grad(x, g))
    dx = g @ w.value.T
    if lora is None:
        return dx
    z, delta, s = cache
    lora.s.add_grad(np.array(np.sum(g * delta)))
    dz = s * (g @ lora.w_up.value.T)
    lora.w_up.add_grad(s * flat_weight_grad(z, g))
    lora.w_down.add_grad(flat_weight_grad(x, dz))
    return dx + dz @ lora.w_down.value.T


def lora_project(x: np.ndarray, w: ParamTensor, lora: LoraPair) -> np.ndarray:
    """Forward-only adapted projection."""
    y, _ = lora_project_fwd(x, w, lora)
    return y


def merge_lora(w: np.ndarray, lora: LoraPair) -> np.ndarray:
    """Fold the low-rank delta into a plain weight for inference."""
    if lora.merged:
        raise StateError("low-rank pair already merged")
    merged = w + float(lora.s.value) * (lora.w_down.value @ lora.w_up.value)
    lora.merged = True
    return merged


# ---------------------------------------------------------------------------
# attention core (prefix length >= 0, optional K/V LoRA)


def sprefix_attend_fwd(
    x: np.ndarray,
    w: AttentionWeights,
    prefix: PrefixBank | None = None,
    lora_k: LoraPair | None = None,
    lora_v: LoraPair | None = None,
    mask: AttnMask = AttnMask("none"),
):
    """Forward pass; returns (output, cache).

    ``x`` is [..., n, d]; leading axes are treated as a batch. The cache
    keeps the pre-scaling softmax weights per head so callers can audit row
    masses and the gate without re-deriving them.
    """
    if x.ndim < 2 or x.shape[-1] != w.d:
        raise ShapeError(f"input {x.shape} does not match attention width {w.d}")
    prefix = prefix if prefix is not None else EMPTY_PREFIX
    l = prefix.length
    if prefix.p_k is not None and prefix.p_v is None:
        raise ConfigurationError("prefix bank has keys but no values")
    if prefix.p_k is None and prefix.p_v is not None:
        raise ConfigurationError("prefix bank has values but no keys")

    n = x.shape[-2]
    lead = x.shape[:-2]
    h, dh = w.heads, w.head_dim
    scale = 1.0 / np.sqrt(dh)
    s_p = float(prefix.s_p.value)

    q = x @ w.w_q.value
    k, k_cache = lora_project_fwd(x, w.w_k, lora_k)
    v, v_cache = lora_project_fwd(x, w.w_v, lora_v)
    if l > 0:
        p_k = np.broadcast_to(prefix.p_k.value, (*lead, l, w.d))
        p_v = np.broadcast_to(prefix.p_v.value, (*lead, l, w.d))
        k_full = np.concatenate([p_k, k], axis=-2)
        v_full = np.concatenate([p_v, v], axis=-2)
    else:
        k_full, v_full = k, v

    allowed = _content_mask(n, mask)
    attn = np.empty((h, *lead, n, l + n))
    out_heads = np.empty_like(q)
    for i in range(h):
        sl = slice(i * dh, (i + 1) * dh)
        logits = scale * (q[..., sl] @ np.swapaxes(k_full[..., sl], -1, -2))
        logits[..., l:][..., ~allowed] = -np.inf
        a = softmax_rows(logits)
        attn[i] = a
        a_scaled = a.copy()
        a_scaled[..., :l] *= s_p
        out_heads[..., sl] = a_scaled @ v_full[..., sl]
    out = out_heads @ w.w_o.value

    cache = {
        "x": x,
        "q": q,
        "k_full": k_full,
        "v_full": v_full,
        "attn": attn,
        "out_heads": out_heads,
        "k_cache": k_cache,
        "v_cache": v_cache,
        "l": l,
        "mask": mask,
        "s_p": s_p,
    }
    return out, cache


def sprefix_attend_bwd(
    g: np.ndarray,
    cache,
    w: AttentionWeights,
    prefix: PrefixBank | None = None,
    lora_k: LoraPair | None = None,
    lora_v: LoraPair | None = None,
) -> np.ndarray:
    """Backward of ``sprefix_attend_fwd``; accumulates grads, returns dx."""
    prefix = prefix if prefix is not None else EMPTY_PREFIX
    x, q = cache["x"], cache["q"]
    k_full, v_full = cache["k_full"], cache["v_full"]
    attn, out_heads = cache["attn"], cache["out_heads"]
    l, s_p = cache["l"], cache["s_p"]
    h, dh = w.heads, w.head_dim
    scale = 1.0 / np.sqrt(dh)

    w.w_o.add_grad(flat_weight_grad(out_heads, g))
    d_out_heads = g @ w.w_o.value.T

    dq = np.zeros_like(q)
    dk_full = np.zeros_like(k_full)
    dv_full = np.zeros_like(v_full)
    ds_p = 0.0
    for i in range(h):
        sl = slice(i * dh, (i + 1) * dh)
        a = attn[i]
        a_scaled = a.copy()
        a_scaled[..., :l] *= s_p
        d_oh = d_out_heads[..., sl]
        da_scaled = d_oh @ np.swapaxes(v_full[..., sl], -1, -2)
        dv_full[..., sl] += np.swapaxes(a_scaled, -1, -2) @ d_oh
        da = da_scaled.copy()
        if l > 0:
            ds_p += np.sum(da_scaled[..., :l] * a[..., :l])
            da[..., :l] *= s_p
        dlogits = softmax_rows_backward(a, da) * scale
        dq[..., sl] += dlogits @ k_full[..., sl]
        dk_full[..., sl] += np.swapaxes(dlogits, -1, -2) @ q[..., sl]

    if l > 0:
        prefix.p_k.add_grad(lead_sum(dk_full[..., :l, :], 2))
        prefix.p_v.add_grad(lead_sum(dv_full[..., :l, :], 2))
        prefix.s_p.add_grad(np.array(ds_p))
        dk, dv = dk_full[..., l:, :], dv_full[..., l:, :]
    else:
        dk, dv = dk_full, dv_full

    w.w_q.add_grad(flat_weight_grad(x, dq))
    dx = dq @ w.w_q.value.T
    dx += lora_project_bwd(dk, x, w.w_k, lora_k, cache["k_cache"])
    dx += lora_project_bwd(dv, x, w.w_v, lora_v, cache["v_cache"])
    return dx


def sprefix_attend(
    x: np.ndarray,
    w: AttentionWeights,
    prefix: PrefixBank | None,
    lora_k: LoraPair | None = None,
    lora_v: LoraPair | None = None,
    mask: AttnMask = AttnMask("none"),
) -> np.ndarray:
    out, _ = sprefix_attend_fwd(x, w, prefix, lora_k, lora_v, mask)
    return out


def attend(x: np.ndarray, w: AttentionWeights, mask: AttnMask = AttnMask("none")) -> np.ndarray:
    """Plain multi-head attention (no prefix, no low-rank deltas)."""
    out, _ = sprefix_attend_fwd(x, w, None, None, None, mask)
    return out


def attend_fwd(x: np.ndarray, w: AttentionWeights, mask: AttnMask = AttnMask("none")):
    return sprefix_attend_fwd(x, w, None, None, None, mask)


def attend_bwd(g: np.ndarray, cache, w: AttentionWeights) -> np.ndarray:
    return sprefix_attend_bwd(g, cache, w, None, None, None)


# ---------------------------------------------------------------------------
# gate


def prefix_lambda(
    x: np.ndarray,
    w: AttentionWeights,
    prefix: PrefixBank,
    mask: AttnMask = AttnMask("none"),
) -> np.ndarray:
    """Per-head, per-query fraction of attention exp-mass on the prefix.

    Returns an array of shape [heads, n]; masked content positions are
    excluded from the content mass. Uses the same logit scaling as the
    attention core so the gate matches its internal softmax exactly.
    """
    l = prefix.length if prefix is not None else 0
    if l == 0:
        raise ConfigurationError("gate undefined for prefix length 0")
    n, d = x.shape
    h, dh = w.heads, w.head_dim
    scale = 1.0 / np.sqrt(dh)
    q = x @ w.w_q.value
    k = x @ w.w_k.value
    allowed = _content_mask(n, mask)

    lam = np.empty((h, n))
    for i in range(h):
        sl = slice(i * dh, (i + 1) * dh)
        logits_p = scale * (q[:, sl] @ prefix.p_k.value[:, sl].T)
        logits_c = scale * (q[:, sl] @ k[:, sl].T)
        logits_c[~allowed] = -np.inf
        m = np.maximum(
            np.max(logits_p, axis=1, keepdims=True), np.max(logits_c, axis=1, keepdims=True)
        )
        mass_p = np.sum(np.exp(logits_p - m), axis=1)
        mass_c = np.sum(np.exp(logits_c - m), axis=1)
        lam[i] = mass_p / (mass_p + mass_c)
    return lam


# ---------------------------------------------------------------------------
# expansion identity


def lora_expansion_terms(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    dk: np.ndarray,
    dv: np.ndarray,
):
    """Split Q (K+dK)^T (V+dV) into its four bilinear terms.

    Returns (Q K^T V, Q K^T dV, Q dK^T V, Q dK^T dV); the sum equals the
    direct product of the adapted keys and values.
    """
    qkt = q @ k.T
    qdkt = q @ dk.T
    return qkt @ v, qkt @ dv, qdkt @ v, qdkt @ dv
