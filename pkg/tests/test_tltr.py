import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from asqa import gradcheck, tltr
from asqa.tltr import (
    ActivationStack,
    LoraConfig,
    TltrConfig,
    TokenKind,
    TokenSequence,
    assemble_input,
    attention_block,
    attention_block_forward,
    count_trainable_params,
    init_block,
    init_tltr_params,
    lora_apply,
    lora_delta,
    pool_time,
    project,
    tltr_forward,
)


# ---------------------------------------------------------------------------
# loop-based oracles


def gelu_oracle(u):
    return 0.5 * u * (1 + math.tanh(math.sqrt(2 / math.pi) * (u + 0.044715 * u**3)))


def block_oracle(seq, p, n_heads):
    """One sequence [n, d] through attention + FFN using explicit loops."""
    n, d = seq.shape
    dh = d // n_heads
    q = [[sum(seq[i, a] * p["wq"][a, j] for a in range(d)) + p["bq"][j] for j in range(d)] for i in range(n)]
    k = [[sum(seq[i, a] * p["wk"][a, j] for a in range(d)) + p["bk"][j] for j in range(d)] for i in range(n)]
    v = [[sum(seq[i, a] * p["wv"][a, j] for a in range(d)) + p["bv"][j] for j in range(d)] for i in range(n)]
    ctx = [[0.0] * d for _ in range(n)]
    for h in range(n_heads):
        cols = range(h * dh, (h + 1) * dh)
        for i in range(n):
            scores = [sum(q[i][c] * k[j][c] for c in cols) / math.sqrt(dh) for j in range(n)]
            m = max(scores)
            e = [math.exp(s - m) for s in scores]
            z = sum(e)
            for c in cols:
                ctx[i][c] = sum(e[j] / z * v[j][c] for j in range(n))
    out = np.zeros((n, d))
    hdim = p["w1"].shape[1]
    for i in range(n):
        hrow = [seq[i, c] + sum(ctx[i][a] * p["wo"][a, c] for a in range(d)) + p["bo"][c] for c in range(d)]
        u = [gelu_oracle(sum(hrow[a] * p["w1"][a, j] for a in range(d)) + p["b1"][j]) for j in range(hdim)]
        for c in range(d):
            out[i, c] = hrow[c] + sum(u[j] * p["w2"][j, c] for j in range(hdim)) + p["b2"][c]
    return out


def pool_oracle(data, factor):
    L, T, d = data.shape
    t = T // factor
    out = np.zeros((L, t, d))
    for l in range(L):
        for i in range(t):
            for c in range(d):
                out[l, i, c] = sum(float(data[l, i * factor + j, c]) for j in range(factor)) / factor
    return out


def tltr_oracle(data, cfg, params):
    pooled = pool_oracle(data, cfg.pooling_factor)[:, : cfg.pooled_len_cap]
    L, t, d = pooled.shape
    block = lambda axis: {k.split(".", 1)[1]: v for k, v in params.items() if k.startswith(f"{axis}0.")}
    x = np.stack([block_oracle(pooled[l], block("time"), cfg.n_heads) for l in range(L)])
    y = np.stack([block_oracle(x[:, i], block("layer"), cfg.n_heads) for i in range(t)])
    return y.mean(axis=1)


class TestAttention:
    @pytest.mark.parametrize("n_heads", [1, 2, 4])
    def test_matches_loop_oracle(self, n_heads):
        rng = np.random.default_rng(n_heads)
        p = init_block(4, rng, ffn_mult=2)
        x = rng.standard_normal((2, 3, 4))
        got = attention_block(x, p, n_heads)
        for b in range(2):
            assert_allclose(got[b], block_oracle(x[b], p, n_heads), rtol=1e-10, atol=1e-12)

    @given(st.integers(1, 6), st.sampled_from([1, 2, 4]), st.integers(0, 1000))
    def test_attention_rows_sum_to_one(self, n, n_heads, seed):
        rng = np.random.default_rng(seed)
        p = init_block(8, rng, scale=2.0)
        _, cache = attention_block_forward(rng.standard_normal((3, n, 8)) * 5, p, n_heads)
        assert_allclose(cache["attn"].sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(cache["attn"] >= 0)

    def test_single_token_attends_to_itself(self):
        p = init_block(4, np.random.default_rng(0))
        _, cache = attention_block_forward(np.ones((1, 4)), p, 2)
        assert np.all(cache["attn"] == 1.0)

    def test_width_mismatch(self):
        p = init_block(4, np.random.default_rng(0))
        with pytest.raises(ValueError):
            attention_block(np.zeros((2, 6)), p)


class TestTltr:
    def test_pool_matches_oracle_and_drops_tail(self):
        data = np.random.default_rng(0).standard_normal((2, 11, 3)).astype(np.float32)
        out = pool_time(data, 4)
        assert out.shape == (2, 2, 3)
        assert_allclose(out, pool_oracle(data, 4), rtol=1e-12)

    def test_pool_identity_and_constant(self):
        data = np.random.default_rng(1).standard_normal((2, 5, 3))
        assert_allclose(pool_time(data, 1), data)
        assert_allclose(pool_time(np.full((1, 8, 2), 3.5), 4), 3.5)

    def test_pool_factor_must_be_positive(self):
        with pytest.raises(ValueError):
            pool_time(np.zeros((1, 4, 2)), 0)

    def test_toy_shape(self):
        cfg = TltrConfig(n_layers_in=4, d_model=16, pooling_factor=4, d_llm=8, n_heads=4)
        assert tltr_forward(tltr.synthetic_stack(4, 8, 16), cfg, init_tltr_params(cfg)).shape == (2, 16)

    def test_invariant_to_permutation_within_pooling_window(self):
        cfg = TltrConfig(n_layers_in=2, d_model=4, pooling_factor=3, d_llm=4, n_heads=2, ffn_mult=1)
        params = init_tltr_params(cfg, seed=3)
        stack = tltr.synthetic_stack(2, 9, 4, seed=3)
        perm = stack.data[:, [2, 0, 1, 3, 4, 5, 8, 6, 7]]
        assert_allclose(tltr_forward(ActivationStack(perm), cfg, params), tltr_forward(stack, cfg, params), rtol=1e-6)

    def test_forward_matches_oracle(self):
        cfg = TltrConfig(n_layers_in=3, d_model=4, pooling_factor=3, pooled_len_cap=2, d_llm=5, n_heads=2, ffn_mult=2)
        params = init_tltr_params(cfg, seed=1)
        stack = tltr.synthetic_stack(3, 10, 4, seed=2)
        out = tltr_forward(stack, cfg, params)
        assert out.shape == (2, 4)
        assert_allclose(out, tltr_oracle(stack.data, cfg, params), rtol=1e-9, atol=1e-12)

    @given(st.integers(0, 200))
    def test_output_length(self, n_frames):
        cfg = TltrConfig(n_layers_in=2, d_model=4, pooling_factor=8, pooled_len_cap=25, d_llm=4, n_heads=1, ffn_mult=1)
        stack = tltr.synthetic_stack(2, n_frames, 4)
        assert tltr_forward(stack, cfg, init_tltr_params(cfg)).shape == (min(n_frames // 8, 25), 4)

    def test_too_short_for_one_window_backward(self):
        cfg = TltrConfig(n_layers_in=2, d_model=4, pooling_factor=8, d_llm=4, n_heads=1, ffn_mult=1)
        stack = tltr.synthetic_stack(2, 5, 4)
        dstack, grads = tltr.tltr_backward(np.zeros((0, 4)), stack, cfg, init_tltr_params(cfg))
        assert dstack.shape == (2, 5, 4) and not dstack.any()
        assert set(grads) == set(init_tltr_params(cfg))

    def test_shape_mismatch(self):
        cfg = TltrConfig(n_layers_in=3, d_model=4, pooling_factor=2, d_llm=4, n_heads=1)
        with pytest.raises(ValueError):
            tltr_forward(tltr.synthetic_stack(2, 8, 4), cfg, init_tltr_params(cfg))

    def test_stack_rejects_non_finite(self):
        with pytest.raises(ValueError):
            ActivationStack(np.full((1, 2, 3), np.nan))


class TestStackIO:
    def test_round_trip(self):
        stack = tltr.synthetic_stack(2, 5, 3, seed=4)
        buf = io.BytesIO()
        tltr.write_stack(stack, buf)
        buf.seek(0)
        np.testing.assert_array_equal(tltr.read_stack(buf).data, stack.data)

    @pytest.mark.parametrize("blob", [b"NOPE" + b"\0" * 12, b"ASTK" + (1).to_bytes(4, "little") * 3])
    def test_bad_files(self, blob):
        with pytest.raises(ValueError):
            tltr.read_stack(io.BytesIO(blob))


class TestLora:
    @given(st.integers(1, 4), st.floats(0.5, 32), st.integers(0, 1000))
    def test_equals_merged_weight(self, r, alpha, seed):
        rng = np.random.default_rng(seed)
        d = 6
        w, a, b = rng.standard_normal((d, d)), rng.standard_normal((r, d)), rng.standard_normal((d, r))
        x = rng.standard_normal((4, d))
        assert_allclose(lora_apply(w, a, b, alpha, r, x), x @ (w + lora_delta(a, b, alpha, r)).T, rtol=1e-10, atol=1e-10)

    def test_zero_b_is_identity_adapter(self):
        rng = np.random.default_rng(0)
        w, a, x = rng.standard_normal((5, 5)), rng.standard_normal((2, 5)), rng.standard_normal((3, 5))
        np.testing.assert_array_equal(lora_apply(w, a, np.zeros((5, 2)), 16, 2, x), x @ w.T)

    def test_rank_zero_rejected(self):
        with pytest.raises(ValueError):
            lora_apply(np.eye(2), np.zeros((0, 2)), np.zeros((2, 0)), 1, 0, np.ones((1, 2)))


class TestParamCounts:
    def test_tltr_count_matches_instantiated_arrays(self):
        cfg = TltrConfig(n_layers_in=2, d_model=8, pooling_factor=2, d_llm=4, n_heads=2, depth=2, ffn_mult=3)
        assert tltr.tltr_param_count(cfg) == sum(v.size for v in init_tltr_params(cfg).values())

    def test_lora_count_matches_adapter_shapes(self):
        cfg = LoraConfig(rank=3, n_attention_layers=5, d_attn=7)
        shapes = [((cfg.rank, cfg.d_attn), (cfg.d_attn, cfg.rank))] * (cfg.n_attention_layers * len(cfg.targets))
        assert tltr.lora_param_count(cfg) == sum(a[0] * a[1] + b[0] * b[1] for a, b in shapes)

    def test_defaults(self):
        counts = count_trainable_params(TltrConfig(), LoraConfig())
        assert counts.lora == 4_194_304
        assert counts.projection == 5_246_976
        assert counts.total == counts.tltr + counts.lora + counts.projection

    def test_rank_zero_means_no_adapters(self):
        assert tltr.lora_param_count(LoraConfig(rank=0)) == 0


class TestAssembly:
    def test_caps_audio_and_counts_separators(self):
        a = TokenSequence(TokenKind.AUDIO, np.zeros((40, 3)))
        s = TokenSequence(TokenKind.SPOKEN_TEXT, [1, 2, 3])
        q = TokenSequence(TokenKind.QUESTION, [4, 5])
        out = assemble_input(a, s, q, separator=(9,))
        assert out.audio.shape == (25, 3)
        assert len(out) == 25 + 3 + 2 + 2
        assert [seg.kind for seg in out.segments] == [TokenKind.AUDIO, TokenKind.SPOKEN_TEXT, TokenKind.QUESTION]

    def test_empty_spoken_text(self):
        out = assemble_input(TokenSequence(TokenKind.AUDIO, np.zeros((3, 2))), TokenSequence(TokenKind.SPOKEN_TEXT, []), TokenSequence(TokenKind.QUESTION, [1]))
        assert len(out) == 4

    def test_wrong_order(self):
        a = TokenSequence(TokenKind.AUDIO, np.zeros((1, 2)))
        with pytest.raises(ValueError):
            assemble_input(a, TokenSequence(TokenKind.QUESTION, [1]), TokenSequence(TokenKind.SPOKEN_TEXT, [2]))


def test_project_shape_check():
    with pytest.raises(ValueError):
        project(np.zeros((2, 3)), np.zeros((4, 5)), np.zeros(5))


class TestGradCheck:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    @pytest.mark.parametrize("name", sorted(gradcheck.OBJECTIVES))
    def test_analytic_matches_numeric(self, name, seed):
        fn, params = gradcheck.OBJECTIVES[name](seed=seed)
        assert gradcheck.grad_check(fn, params, eps=1e-6) < 1e-3

    def test_detects_a_wrong_gradient(self):
        fn, params = gradcheck.project_objective()

        def broken(p):
            value, grads = fn(p)
            return value, {**grads, "b": grads["b"] * 1.01}

        assert gradcheck.grad_check(broken, params) > 1e-3

    @pytest.mark.parametrize("eps", [1e-7, 1e-2])
    def test_eps_bounds(self, eps):
        with pytest.raises(ValueError):
            gradcheck.grad_check(*gradcheck.project_objective(), eps=eps)
