import numpy as np
import pytest

from petltower.attention import (
    AttentionWeights,
    AttnMask,
    LoraPair,
    PrefixBank,
    attend,
    lora_expansion_terms,
    lora_project,
    merge_lora,
    prefix_lambda,
    sprefix_attend,
    sprefix_attend_bwd,
    sprefix_attend_fwd,
)
from petltower.errors import ConfigurationError, ShapeError, StateError
from petltower.tensor import ParamTensor, check_gradient


def make_weights(rng, d=16, heads=2, trainable=False):
    def pt(name):
        return ParamTensor(rng.normal(0, d**-0.5, size=(d, d)), trainable=trainable, name=name)

    return AttentionWeights(pt("w_q"), pt("w_k"), pt("w_v"), pt("w_o"), heads=heads)


def make_prefix(rng, l=3, d=16, s_p=1.0, std=0.3):
    return PrefixBank(
        p_k=ParamTensor(rng.normal(0, std, size=(l, d)), name="p_k"),
        p_v=ParamTensor(rng.normal(0, std, size=(l, d)), name="p_v"),
        s_p=ParamTensor(np.array(s_p), name="s_p"),
    )


def make_lora(rng, d=16, r=2, zero_up=False, name="lora"):
    up = np.zeros((r, d)) if zero_up else rng.normal(0, 0.3, size=(r, d))
    return LoraPair(
        w_down=ParamTensor(rng.normal(0, 0.3, size=(d, r)), name=f"{name}.w_down"),
        w_up=ParamTensor(up, name=f"{name}.w_up"),
        s=ParamTensor(np.array(1.0), name=f"{name}.s"),
    )


def naive_mha(x, w, causal=False):
    """Independent per-head loop reference for plain attention."""
    n, d = x.shape
    h = w.heads
    dh = d // h
    q = x @ w.w_q.value
    k = x @ w.w_k.value
    v = x @ w.w_v.value
    out = np.zeros((n, d))
    for head in range(h):
        sl = slice(head * dh, (head + 1) * dh)
        for i in range(n):
            logits = np.array(
                [
                    q[i, sl] @ k[j, sl] / np.sqrt(dh) if (not causal or j <= i) else -np.inf
                    for j in range(n)
                ]
            )
            weights = np.exp(logits - logits.max())
            weights /= weights.sum()
            for j in range(n):
                out[i, sl] += weights[j] * v[j, sl]
    return out @ w.w_o.value


class TestAttend:
    def test_single_token_output_is_value_projection(self):
        rng = np.random.default_rng(0)
        w = make_weights(rng)
        x = rng.normal(size=(1, 16))
        expected = (x @ w.w_v.value) @ w.w_o.value
        assert np.array_equal(attend(x, w), expected)

    def test_causal_upper_weights_exactly_zero(self):
        rng = np.random.default_rng(1)
        w = make_weights(rng)
        x = rng.normal(size=(3, 16))
        _, cache = sprefix_attend_fwd(x, w, mask=AttnMask("causal"))
        attn = cache["attn"]
        for head in range(w.heads):
            assert np.array_equal(np.triu(attn[head], k=1), np.zeros((3, 3)))

    def test_matches_naive_reference(self):
        rng = np.random.default_rng(2)
        w = make_weights(rng)
        x = rng.normal(size=(5, 16))
        assert np.max(np.abs(attend(x, w) - naive_mha(x, w))) < 1e-12
        assert (
            np.max(np.abs(attend(x, w, AttnMask("causal")) - naive_mha(x, w, causal=True))) < 1e-12
        )

    def test_shape_mismatch(self):
        rng = np.random.default_rng(3)
        w = make_weights(rng)
        with pytest.raises(ShapeError):
            attend(rng.normal(size=(4, 8)), w)

    def test_causal_containment(self):
        rng = np.random.default_rng(4)
        w = make_weights(rng)
        prefix = make_prefix(rng)
        x = rng.normal(size=(6, 16))
        base = sprefix_attend(x, w, prefix, mask=AttnMask("causal"))
        x2 = x.copy()
        x2[4] += rng.normal(size=16)
        changed = sprefix_attend(x2, w, prefix, mask=AttnMask("causal"))
        assert np.array_equal(base[:4], changed[:4])
        assert np.max(np.abs(base[4:] - changed[4:])) > 0


class TestLoraProject:
    def test_zero_up_is_identity_path(self):
        rng = np.random.default_rng(5)
        w = ParamTensor(rng.normal(size=(16, 16)), trainable=False, name="w")
        lora = make_lora(rng, zero_up=True)
        x = rng.normal(size=(4, 16))
        assert np.array_equal(lora_project(x, w, lora), x @ w.value)

    def test_zero_scale_is_identity_path(self):
        rng = np.random.default_rng(6)
        w = ParamTensor(rng.normal(size=(16, 16)), trainable=False, name="w")
        lora = make_lora(rng)
        lora.s.value[()] = 0.0
        x = rng.normal(size=(4, 16))
        assert np.array_equal(lora_project(x, w, lora), x @ w.value)

    def test_rank_too_large_rejected(self):
        rng = np.random.default_rng(7)
        with pytest.raises(ConfigurationError):
            make_lora(rng, d=4, r=4)

    def test_unmerged_equals_merged_path(self):
        rng = np.random.default_rng(8)
        w = ParamTensor(rng.normal(size=(16, 16)), trainable=False, name="w")
        lora = make_lora(rng)
        x = rng.normal(size=(4, 16))
        unmerged = lora_project(x, w, lora)
        merged_w = merge_lora(w.value, lora)
        assert np.max(np.abs(unmerged - x @ merged_w)) < 1e-9


class TestMergeLora:
    def test_zero_up_merge_bitwise_identity(self):
        rng = np.random.default_rng(9)
        w = rng.normal(size=(16, 16))
        lora = make_lora(rng, zero_up=True)
        assert np.array_equal(merge_lora(w, lora), w)

    def test_double_merge_rejected(self):
        rng = np.random.default_rng(10)
        w = rng.normal(size=(16, 16))
        lora = make_lora(rng)
        merge_lora(w, lora)
        with pytest.raises(StateError):
            merge_lora(w, lora)


class TestSprefixAttend:
    def test_empty_prefix_is_plain_attention(self):
        rng = np.random.default_rng(11)
        w = make_weights(rng)
        x = rng.normal(size=(5, 16))
        for kind in ("none", "causal"):
            mask = AttnMask(kind)
            assert np.array_equal(sprefix_attend(x, w, None, mask=mask), attend(x, w, mask))

    def test_missing_values_rejected(self):
        rng = np.random.default_rng(12)
        w = make_weights(rng)
        prefix = make_prefix(rng)
        prefix.p_v = None
        with pytest.raises(ConfigurationError):
            sprefix_attend(rng.normal(size=(4, 16)), w, prefix)

    @pytest.mark.parametrize("mask_kind", ["none", "causal"])
    def test_decomposed_form_oracle(self, mask_kind):
        """Concatenated-softmax implementation vs the two-term gate form."""
        rng = np.random.default_rng(13)
        for trial in range(100):
            w = make_weights(rng)
            prefix = make_prefix(rng, s_p=1.0)
            x = rng.normal(size=(5, 16))
            mask = AttnMask(mask_kind)
            ours = sprefix_attend(x, w, prefix, mask=mask)
            ref = decomposed_reference(x, w, prefix, mask)
            assert np.max(np.abs(ours - ref)) < 1e-10

    def test_general_scale_decomposition(self):
        rng = np.random.default_rng(14)
        w = make_weights(rng)
        prefix = make_prefix(rng, s_p=7.5)
        x = rng.normal(size=(5, 16))
        ours = sprefix_attend(x, w, prefix)
        ref = decomposed_reference(x, w, prefix)
        assert np.max(np.abs(ours - ref)) < 1e-10

    def test_zero_scale_leaves_gated_content(self):
        rng = np.random.default_rng(15)
        w = make_weights(rng, heads=1)
        prefix = make_prefix(rng, s_p=0.0)
        x = rng.normal(size=(5, 16))
        lam = prefix_lambda(x, w, prefix)[0]
        expected = (1.0 - lam)[:, None] * attend(x, w)
        assert np.max(np.abs(sprefix_attend(x, w, prefix) - expected)) < 1e-12

    def test_row_mass_after_scaling(self):
        rng = np.random.default_rng(16)
        w = make_weights(rng)
        prefix = make_prefix(rng, s_p=4.0)
        x = rng.normal(size=(6, 16))
        _, cache = sprefix_attend_fwd(x, w, prefix)
        attn = cache["attn"]
        l = prefix.length
        lam = prefix_lambda(x, w, prefix)
        assert np.max(np.abs(attn.sum(axis=2) - 1.0)) < 1e-12
        scaled_mass = 4.0 * attn[:, :, :l].sum(axis=2) + attn[:, :, l:].sum(axis=2)
        assert np.max(np.abs(scaled_mass - ((1 - lam) + 4.0 * lam))) < 1e-10

    def test_gradient_scaling_law(self):
        """grad(p_v) at s_p = c is exactly c times grad(p_v) at s_p = 1."""
        rng = np.random.default_rng(17)
        w = make_weights(rng)
        x = rng.normal(size=(5, 16))
        g = rng.normal(size=(5, 16))
        grads = {}
        for c in (1.0, 10.0):
            rng_p = np.random.default_rng(99)
            prefix = make_prefix(rng_p, s_p=c)
            lora_k = None
            out, cache = sprefix_attend_fwd(x, w, prefix)
            sprefix_attend_bwd(g, cache, w, prefix)
            grads[c] = prefix.p_v.grad.copy()
        rel = np.abs(grads[10.0] - 10.0 * grads[1.0]) / (
            np.abs(grads[10.0]) + np.abs(10.0 * grads[1.0])
        )
        assert np.max(rel) < 1e-9

    def test_all_trainables_pass_gradcheck(self):
        rng = np.random.default_rng(18)
        w = make_weights(rng, trainable=False)
        prefix = make_prefix(rng, s_p=1.7)
        lora_k = make_lora(rng, name="lora_k")
        lora_v = make_lora(rng, name="lora_v")
        x = rng.normal(size=(5, 16))
        r = rng.normal(size=(5, 16))
        mask = AttnMask("causal")

        def f():
            out, cache = sprefix_attend_fwd(x, w, prefix, lora_k, lora_v, mask)
            sprefix_attend_bwd(r, cache, w, prefix, lora_k, lora_v)
            return float(np.sum(r * out))

        params = {
            "p_k": prefix.p_k,
            "p_v": prefix.p_v,
            "s_p": prefix.s_p,
            "lora_k.down": lora_k.w_down,
            "lora_k.up": lora_k.w_up,
            "lora_k.s": lora_k.s,
            "lora_v.down": lora_v.w_down,
            "lora_v.up": lora_v.w_up,
            "lora_v.s": lora_v.s,
            "w_q": w.w_q,  # frozen: must stay zero
        }
        report = check_gradient(f, params, rng=np.random.default_rng(0))
        assert report.worst < 1e-4, report.per_param


def decomposed_reference(x, w, prefix, mask=AttnMask("none")):
    """Two-term gate form built per head from separate softmaxes."""
    n, d = x.shape
    h, dh = w.heads, d // w.heads
    scale = 1.0 / np.sqrt(dh)
    l = prefix.length
    s_p = float(prefix.s_p.value)
    q = x @ w.w_q.value
    k = x @ w.w_k.value
    v = x @ w.w_v.value
    allowed = (
        np.tril(np.ones((n, n), dtype=bool)) if mask.kind == "causal" else np.ones((n, n), bool)
    )
    lam = prefix_lambda(x, w, prefix, mask)
    out = np.zeros((n, d))
    for head in range(h):
        sl = slice(head * dh, (head + 1) * dh)
        logits_c = scale * (q[:, sl] @ k[:, sl].T)
        logits_c[~allowed] = -np.inf
        base = (np.exp(logits_c - logits_c.max(axis=1, keepdims=True))) @ v[:, sl]
        base /= np.exp(logits_c - logits_c.max(axis=1, keepdims=True)).sum(axis=1, keepdims=True)
        logits_p = scale * (q[:, sl] @ prefix.p_k.value[:, sl].T)
        soft_p = np.exp(logits_p - logits_p.max(axis=1, keepdims=True))
        soft_p /= soft_p.sum(axis=1, keepdims=True)
        task = soft_p @ prefix.p_v.value[:, sl]
        lam_h = lam[head][:, None]
        out[:, sl] = (1.0 - lam_h) * base + s_p * lam_h * task
    return out @ w.w_o.value


class TestPrefixLambda:
    def test_uniform_logits(self):
        d, l, n = 16, 2, 6
        w = AttentionWeights(
            ParamTensor(np.zeros((d, d)), name="w_q"),
            ParamTensor(np.eye(d), name="w_k"),
            ParamTensor(np.eye(d), name="w_v"),
            ParamTensor(np.eye(d), name="w_o"),
            heads=2,
        )
        prefix = PrefixBank(
            p_k=ParamTensor(np.ones((l, d)), name="p_k"),
            p_v=ParamTensor(np.ones((l, d)), name="p_v"),
            s_p=ParamTensor(np.array(1.0), name="s_p"),
        )
        x = np.random.default_rng(19).normal(size=(n, d))
        lam = prefix_lambda(x, w, prefix)
        assert np.allclose(lam, l / (l + n), atol=1e-14)

    def test_causal_first_position(self):
        d, l, n = 16, 2, 6
        w = AttentionWeights(
            ParamTensor(np.zeros((d, d)), name="w_q"),
            ParamTensor(np.eye(d), name="w_k"),
            ParamTensor(np.eye(d), name="w_v"),
            ParamTensor(np.eye(d), name="w_o"),
            heads=2,
        )
        prefix = PrefixBank(
            p_k=ParamTensor(np.ones((l, d)), name="p_k"),
            p_v=ParamTensor(np.ones((l, d)), name="p_v"),
            s_p=ParamTensor(np.array(1.0), name="s_p"),
        )
        x = np.random.default_rng(20).normal(size=(n, d))
        lam = prefix_lambda(x, w, prefix, AttnMask("causal"))
        assert np.allclose(lam[:, 0], 2.0 / 3.0, atol=1e-14)

    def test_zero_length_rejected(self):
        rng = np.random.default_rng(21)
        w = make_weights(rng)
        empty = PrefixBank(None, None, ParamTensor(np.array(1.0), name="s_p"))
        with pytest.raises(ConfigurationError):
            prefix_lambda(rng.normal(size=(3, 16)), w, empty)

    def test_consistent_with_attention_internals(self):
        rng = np.random.default_rng(22)
        w = make_weights(rng)
        prefix = make_prefix(rng, s_p=3.0)
        lora_k = make_lora(rng, zero_up=True, name="lora_k")
        x = rng.normal(size=(6, 16))
        for mask in (AttnMask("none"), AttnMask("causal")):
            lam = prefix_lambda(x, w, prefix, mask)
            _, cache = sprefix_attend_fwd(x, w, prefix, lora_k, None, mask)
            lam_from_attn = cache["attn"][:, :, : prefix.length].sum(axis=2)
            assert np.max(np.abs(lam - lam_from_attn)) < 1e-12


class TestExpansionTerms:
    def test_zero_deltas(self):
        rng = np.random.default_rng(23)
        q, k, v = (rng.normal(size=(4, 8)) for _ in range(3))
        t1, t2, t3, t4 = lora_expansion_terms(q, k, v, np.zeros((4, 8)), np.zeros((4, 8)))
        assert np.array_equal(t1, (q @ k.T) @ v)
        for t in (t2, t3, t4):
            assert np.array_equal(t, np.zeros((4, 8)))

    def test_sum_matches_direct_product(self):
        rng = np.random.default_rng(24)
        for _ in range(100):
            q, k, v, dk, dv = (rng.normal(size=(4, 8)) for _ in range(5))
            terms = lora_expansion_terms(q, k, v, dk, dv)
            direct = (q @ (k + dk).T) @ (v + dv)
            assert np.max(np.abs(sum(terms) - direct)) < 1e-9

    def test_value_delta_linearity(self):
        rng = np.random.default_rng(25)
        q, k, v, dv = (rng.normal(size=(4, 8)) for _ in range(4))
        _, t2, _, _ = lora_expansion_terms(q, k, v, np.zeros((4, 8)), dv)
        direct = (q @ k.T) @ (v + dv)
        assert np.max(np.abs(t2 - (direct - (q @ k.T) @ v))) < 1e-9
