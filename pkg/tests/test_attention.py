import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qattn.attention import (
    AttentionConfig, accumulate_pv, attention_oracle, attention_sage2, attention_tiled_fp,
)
from qattn.errors import ConfigError
from qattn.metrics import cos_sim, rmse
from qattn.synth import GenSpec, gen_qkv

FULL = AttentionConfig.full_precision()


def loop_attention(q, k, v, causal=False):
    """Row-by-row softmax with explicit Python sums (second implementation)."""
    n, d = q.shape
    out = np.zeros((n, v.shape[1]))
    for i in range(n):
        cols = range(i + 1) if causal else range(k.shape[0])
        s = [sum(q[i, c] * k[j, c] for c in range(d)) / math.sqrt(d) for j in cols]
        mx = max(s)
        w = [math.exp(x - mx) for x in s]
        tot = math.fsum(w)
        for j, wj in zip(cols, w):
            out[i] += wj / tot * v[j]
    return out


def rand_qkv(seed, n, d, scale=1.0):
    rng = np.random.default_rng(seed)
    return tuple(rng.standard_normal((n, d)) * scale for _ in range(3))


class TestOracle:
    def test_single_token(self):
        q, k, v = rand_qkv(0, 1, 8)
        assert np.array_equal(attention_oracle(q, k, v), v)

    def test_uniform(self):
        rng = np.random.default_rng(1)
        k = rng.standard_normal((6, 4))
        k[:, 0] = 0.0
        q = np.zeros((3, 4))
        q[:, 0] = 1.0
        v = rng.standard_normal((6, 5))
        assert np.allclose(attention_oracle(q, k, v), np.tile(v.mean(axis=0), (3, 1)), atol=1e-15)

    @pytest.mark.parametrize("causal", [False, True])
    def test_hand_case(self, causal):
        q = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0], [-1.0, 0.5]])
        k = np.array([[0.5, 0.5], [1.0, -1.0], [0.0, 3.0], [2.0, 0.0]])
        v = np.array([[1.0, 2.0], [3.0, -1.0], [0.0, 0.0], [5.0, 1.0]])
        assert np.allclose(attention_oracle(q, k, v, causal), loop_attention(q, k, v, causal), rtol=0, atol=1e-14)

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            attention_oracle(np.ones((2, 3)), np.ones((2, 4)), np.ones((2, 3)))
        with pytest.raises(ValueError):
            attention_oracle(np.ones((2, 3)), np.ones((2, 3)), np.ones((3, 3)))


class TestTiled:
    @pytest.mark.parametrize("causal", [False, True])
    def test_matches_oracle(self, causal):
        q, k, v = rand_qkv(2, 512, 64, scale=2.0)
        got = attention_tiled_fp(q, k, v, FULL.replace(causal=causal))
        assert np.abs(got - attention_oracle(q, k, v, causal)).max() <= 1e-12

    def test_single_block_exact(self):
        q, k, v = rand_qkv(3, 50, 16)
        s = q @ k.T / 4.0
        m = s.max(axis=1, keepdims=True)
        p = np.exp(s - m)
        want = (p @ v) / p.sum(axis=1)[:, None]
        assert np.array_equal(attention_tiled_fp(q, k, v), want)

    def test_causal_first_row(self):
        q, k, v = rand_qkv(4, 200, 8)
        out = attention_tiled_fp(q, k, v, FULL.replace(causal=True))
        assert np.allclose(out[0], v[0], rtol=0, atol=1e-15)

    def test_causal_ignores_future(self):
        q, k, v = rand_qkv(5, 300, 16)
        k2, v2 = k.copy(), v.copy()
        k2[150:] += 7.0
        v2[150:] = -v2[150:]
        cfg = FULL.replace(causal=True)
        a = attention_tiled_fp(q, k, v, cfg)
        b = attention_tiled_fp(q, k2, v2, cfg)
        assert np.array_equal(a[:150], b[:150])

    def test_rows_of_p_sum_to_one(self):
        q, k, v = rand_qkv(6, 300, 16, scale=3.0)
        finals = {}

        def grab(i, j, st):
            finals[i] = (st.m.copy(), st.l.copy())

        attention_tiled_fp(q, k, v, on_step=grab)
        s = q @ k.T / 4.0
        for i, (m, l) in finals.items():
            rows = slice(i * 128, min(i * 128 + 128, 300))
            p = np.exp(s[rows] - m[:, None]) / l[:, None]
            assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)


class TestSage2:
    @pytest.mark.parametrize("causal", [False, True])
    def test_quantization_off_equals_tiled(self, causal):
        q, k, v = gen_qkv(GenSpec(n_tokens=300, head_dim=32, seed=1))
        cfg = FULL.replace(causal=causal)
        out, _, _ = attention_sage2(q, k, v, cfg)
        assert np.array_equal(out, attention_tiled_fp(q, k, v, cfg))

    @pytest.mark.parametrize("flags", [(1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 1)])
    @pytest.mark.parametrize("baseline", ["none", "smoothquant", "hadamard"])
    def test_smoothing_exact_without_quantization(self, flags, baseline):
        q, k, v = gen_qkv(GenSpec(n_tokens=257, seed=2, v_bias=(8, 9)))
        cfg = FULL.replace(smooth_q=bool(flags[0]), smooth_k=bool(flags[1]), smooth_v=bool(flags[2]), baseline=baseline)
        out, _, _ = attention_sage2(q, k, v, cfg)
        assert np.abs(out - attention_oracle(q, k, v)).max() <= 1e-10

    def test_sage2_8b_accuracy(self):
        q, k, v = gen_qkv(GenSpec(seed=3))
        cfg = AttentionConfig(qk_format="int8", smooth_q=False)
        out, _, diag = attention_sage2(q, k, v, cfg)
        assert cos_sim(attention_oracle(q, k, v), out) > 0.999
        assert diag.q_groups == 8 * 32 and diag.k_groups == 16 * 4

    def test_smoothing_beats_naive_per_tensor(self):
        q, k, v = gen_qkv(GenSpec(seed=4))
        ref = attention_oracle(q, k, v)
        good, _, _ = attention_sage2(q, k, v, AttentionConfig())
        bad, _, _ = attention_sage2(q, k, v, AttentionConfig(qk_granularity="per-tensor", smooth_q=False, smooth_k=False))
        assert cos_sim(ref, good) - cos_sim(ref, bad) > 0.1

    def test_monotone_accumulation(self):
        for seed in range(3):
            q, k, v = gen_qkv(GenSpec(n_tokens=1024, seed=seed, v_bias=(8, 9)))
            ref = attention_oracle(q, k, v)
            errs = [rmse(ref, attention_sage2(q, k, v, AttentionConfig(accumulation=a))[0])
                    for a in ("fp32-exact", "fp22-two-level", "fp22-single-level")]
            assert errs[0] <= errs[1] <= errs[2]

    def test_chunked_fp22_between_modes(self):
        q, k, v = gen_qkv(GenSpec(n_tokens=512, seed=6, v_bias=(8, 9)))
        ref = attention_sage2(q, k, v, AttentionConfig(accumulation="fp32-exact"))[0]
        e1 = rmse(ref, attention_sage2(q, k, v, AttentionConfig(accumulation="fp22-single-level"))[0])
        e32 = rmse(ref, attention_sage2(q, k, v, AttentionConfig(accumulation="fp22-single-level", fp22_chunk=32))[0])
        assert 0 < e32 < e1

    def test_block_p_scale(self):
        q, k, v = gen_qkv(GenSpec(seed=7))
        ref = attention_oracle(q, k, v)
        for acc in ("fp32-exact", "fp22-two-level"):
            out, _, _ = attention_sage2(q, k, v, AttentionConfig(p_scale="block", accumulation=acc))
            assert cos_sim(ref, out) > 0.99

    def test_smoothing_state(self):
        q, k, v = gen_qkv(GenSpec(n_tokens=300, seed=8))
        _, st, _ = attention_sage2(q, k, v, AttentionConfig(smooth_v=True))
        assert st.q_bar.shape == (3, 64) and st.delta_s.shape == (3, 300)
        assert np.allclose(st.k_bar, k.mean(axis=0)) and np.allclose(st.v_mean, v.mean(axis=0))
        assert np.allclose(st.delta_s_block(1, slice(64, 128)), (k - k.mean(axis=0))[64:128] @ st.q_bar[1])


class TestAccumulate:
    @pytest.mark.parametrize("mode", ["fp32-exact", "fp22-single-level", "fp22-two-level"])
    def test_zero(self, mode):
        assert np.all(accumulate_pv(np.zeros((4, 8)), np.ones((8, 3)), mode) == 0)

    @given(st.integers(0, 10**6))
    def test_representable_sums_are_exact(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.integers(0, 8, (4, 16)).astype(float)
        v = rng.integers(-8, 8, (16, 3)).astype(float)
        acc = rng.integers(-64, 64, (4, 3)).astype(float)
        alpha = np.full(4, 0.5)
        want = accumulate_pv(p, v, "fp32-exact", acc, alpha)
        for mode in ("fp22-single-level", "fp22-two-level"):
            assert np.array_equal(accumulate_pv(p, v, mode, acc, alpha), want)

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            accumulate_pv(np.ones((1, 1)), np.ones((1, 1)), "fp8")


class TestConfig:
    @pytest.mark.parametrize("kw", [
        {"qk_format": "int3"}, {"pv_format": "int8"}, {"accumulation": "fp16"},
        {"accumulation": "fp22-single-level", "p_scale": "block"}, {"b_q": 0},
        {"b_q": 100}, {"fp22_chunk": 0}, {"baseline": "rotate"},
    ])
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            AttentionConfig(**kw)

    def test_int8_pv_with_exact_accumulation(self):
        AttentionConfig(pv_format="int8", accumulation="fp32-exact")

    def test_softmax_scale(self):
        assert AttentionConfig().softmax_scale(64) == 0.125
        assert AttentionConfig(scale=0.5).softmax_scale(64) == 0.5
