"""Score-producer tests: sharing identities, alignment behavior, gradients."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnshare.config import LisaLayerConfig, ModelConfig
from attnshare.errors import ConfigError
from attnshare.rope import rope_tables
from attnshare.sharing import (LisaParams, align_and_integrate, compute_delta,
                               ds_scores, init_lisa_params, lisa_scores,
                               uniform_attention)
from attnshare.tensor import Tape, Tensor, grad_check, tensor_sum

CFG = ModelConfig(n_layers=4, d=24, h=3, h_kv=3, d_k=8, d_ff=32, vocab=16,
                  max_len=32)


def tri(l):
    return np.tril(np.ones((l, l), bool))


def masked_scores(rng, h, l):
    return np.where(tri(l), rng.standard_normal((h, l, l)), 0.0)


def rope_for(l, dim):
    return rope_tables(np.arange(l), dim, CFG.rope_base)


class TestComputeDelta:
    def test_zero_projection(self):
        lcfg = LisaLayerConfig(variant="plus", r_q=4, r_k=4)
        params = LisaParams(Tensor(np.zeros((CFG.d, CFG.h * 4))),
                            Tensor(np.zeros((CFG.d, CFG.h_kv * 4))))
        h_state = Tensor(np.random.default_rng(0).standard_normal((5, CFG.d)))
        cos, sin = rope_for(5, 4)
        out = compute_delta(h_state, params, lcfg, CFG, cos, sin, tri(5))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_full_rank_equals_standard_scores(self):
        # with r = d_k and the original projections, the difference term IS
        # the standard score matrix (same sqrt(d_k) scale)
        rng = np.random.default_rng(1)
        l = 6
        wq = rng.standard_normal((CFG.d, CFG.h * CFG.d_k))
        wk = rng.standard_normal((CFG.d, CFG.h_kv * CFG.d_k))
        h_state = rng.standard_normal((l, CFG.d))
        lcfg = LisaLayerConfig(variant="plus", r_q=CFG.d_k, r_k=CFG.d_k)
        params = LisaParams(Tensor(wq), Tensor(wk))
        cos, sin = rope_for(l, CFG.d_k)
        delta = compute_delta(Tensor(h_state), params, lcfg, CFG, cos, sin, tri(l))

        def rope_np(x):
            out = np.empty_like(x)
            out[..., 0::2] = x[..., 0::2] * cos - x[..., 1::2] * sin
            out[..., 1::2] = x[..., 0::2] * sin + x[..., 1::2] * cos
            return out

        q = rope_np((h_state @ wq).reshape(l, CFG.h, CFG.d_k).transpose(1, 0, 2))
        k = rope_np((h_state @ wk).reshape(l, CFG.h_kv, CFG.d_k).transpose(1, 0, 2))
        want = np.where(tri(l), q @ k.transpose(0, 2, 1) / np.sqrt(CFG.d_k), 0.0)
        np.testing.assert_allclose(delta.data, want, atol=1e-12)

    def test_dense_oracle(self):
        # h=1 equivalent via a flat extended-precision loop
        cfg1 = ModelConfig(n_layers=2, d=8, h=1, h_kv=1, d_k=8, d_ff=8,
                           vocab=4, max_len=16)
        rng = np.random.default_rng(2)
        l, r = 4, 2
        lcfg = LisaLayerConfig(variant="plus", r_q=r, r_k=r)
        wq = rng.standard_normal((8, r))
        wk = rng.standard_normal((8, r))
        h_state = rng.standard_normal((l, 8))
        cos, sin = rope_tables(np.arange(l), r, cfg1.rope_base)
        delta = compute_delta(Tensor(h_state), LisaParams(Tensor(wq), Tensor(wk)),
                              lcfg, cfg1, cos, sin, tri(l))
        q = (h_state @ wq).astype(np.longdouble)
        k = (h_state @ wk).astype(np.longdouble)

        def rot(v, t):
            c, s = np.cos(np.longdouble(t)), np.sin(np.longdouble(t))
            return np.array([v[0] * c - v[1] * s, v[0] * s + v[1] * c])

        want = np.zeros((l, l), dtype=np.longdouble)
        for i in range(l):
            for j in range(i + 1):
                qi = rot(q[i], i)  # first pair angle = position * base**0
                kj = rot(k[j], j)
                want[i, j] = (qi @ kj) / np.sqrt(np.longdouble(r))
        np.testing.assert_allclose(delta.data[0], want.astype(float), atol=1e-10)

    def test_gqa_grouping(self):
        cfg = ModelConfig(n_layers=2, d=32, h=4, h_kv=2, d_k=8, d_ff=16,
                          vocab=4, max_len=16)
        rng = np.random.default_rng(3)
        lcfg = LisaLayerConfig(variant="plus", r_q=2, r_k=2)
        params = LisaParams(Tensor(rng.standard_normal((32, 4 * 2))),
                            Tensor(rng.standard_normal((32, 2 * 2))))
        h_state = Tensor(rng.standard_normal((3, 32)))
        cos, sin = rope_tables(np.arange(3), 2, cfg.rope_base)
        out = compute_delta(h_state, params, lcfg, cfg, cos, sin, tri(3)).data
        # query heads 0,1 share kv head 0; heads 2,3 share kv head 1
        assert not np.allclose(out[0], out[1])
        # recompute head 2 by hand against kv head 1
        q = (h_state.data @ params.w_lr_q.data).reshape(3, 4, 2).transpose(1, 0, 2)
        k = (h_state.data @ params.w_lr_k.data).reshape(3, 2, 2).transpose(1, 0, 2)

        def rope_np(x):
            y = np.empty_like(x)
            y[..., 0::2] = x[..., 0::2] * cos - x[..., 1::2] * sin
            y[..., 1::2] = x[..., 0::2] * sin + x[..., 1::2] * cos
            return y

        q, k = rope_np(q), rope_np(k)
        want = np.where(tri(3), q[2] @ k[1].T / np.sqrt(2), 0.0)
        np.testing.assert_allclose(out[2], want, atol=1e-12)


class TestAlignIntegrate:
    def test_one_hot_permutation(self):
        # one-hot single-layer map sending shared head 3 -> out 1,
        # 2 -> 2, 1 -> 3 (1-based), zeros on the difference block
        h, l = 3, 5
        rng = np.random.default_rng(4)
        a_prev = Tensor(masked_scores(rng, h, l))
        a_delta = Tensor(masked_scores(rng, h, l))
        w = np.zeros((2 * h, h))
        w[2, 0] = 1.0  # out head 1 <- shared head 3
        w[1, 1] = 1.0
        w[0, 2] = 1.0
        lcfg = LisaLayerConfig(variant="sl", r_q=2, r_k=2)
        params = LisaParams(Tensor(np.zeros((CFG.d, h * 2))),
                            Tensor(np.zeros((CFG.d, h * 2))), align_w=Tensor(w))
        out = align_and_integrate(a_prev, a_delta, params, lcfg, tri(l)).data
        np.testing.assert_array_equal(out[0], a_prev.data[2])
        np.testing.assert_array_equal(out[1], a_prev.data[1])
        np.testing.assert_array_equal(out[2], a_prev.data[0])

    def test_plus_additive_identity(self):
        rng = np.random.default_rng(5)
        a_prev = Tensor(masked_scores(rng, 3, 4))
        zeros = Tensor(np.zeros_like(a_prev.data))
        lcfg = LisaLayerConfig(variant="plus", r_q=2, r_k=2)
        out = align_and_integrate(a_prev, zeros, None, lcfg, tri(4))
        np.testing.assert_array_equal(out.data, a_prev.data)

    def test_head_fusion(self):
        # one output column weighting two shared heads at 0.5 each
        h, l = 3, 4
        rng = np.random.default_rng(6)
        a_prev = Tensor(masked_scores(rng, h, l))
        a_delta = Tensor(np.zeros((h, l, l)))
        w = np.zeros((2 * h, h))
        w[0, 0] = w[1, 0] = 0.5
        lcfg = LisaLayerConfig(variant="sl", r_q=2, r_k=2)
        params = LisaParams(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2))),
                            align_w=Tensor(w))
        out = align_and_integrate(a_prev, a_delta, params, lcfg, tri(l)).data
        np.testing.assert_allclose(out[0], 0.5 * (a_prev.data[0] + a_prev.data[1]),
                                   atol=1e-15)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 8), st.randoms(use_true_random=False))
    def test_permutation_realizable(self, h, rnd):
        perm = list(range(h))
        rnd.shuffle(perm)
        l = 4
        rng = np.random.default_rng(7)
        a_prev = Tensor(masked_scores(rng, h, l))
        a_delta = Tensor(masked_scores(rng, h, l))
        w = np.zeros((2 * h, h))
        for out_head, src in enumerate(perm):
            w[src, out_head] = 1.0
        lcfg = LisaLayerConfig(variant="sl", r_q=2, r_k=2)
        params = LisaParams(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2))),
                            align_w=Tensor(w))
        out = align_and_integrate(a_prev, a_delta, params, lcfg, tri(l)).data
        for out_head, src in enumerate(perm):
            np.testing.assert_array_equal(out[out_head], a_prev.data[src])

    def test_masked_positions_stay_zero_dl(self):
        h, l = 2, 5
        rng = np.random.default_rng(8)
        a_prev = Tensor(masked_scores(rng, h, l))
        a_delta = Tensor(masked_scores(rng, h, l))
        lcfg = LisaLayerConfig(variant="dl", ffn_hidden=8, r_q=2, r_k=2)
        cfg = ModelConfig(n_layers=2, d=16, h=2, h_kv=2, d_k=8, d_ff=8,
                          vocab=4, max_len=8)
        params = init_lisa_params(cfg, lcfg, rng)
        out = align_and_integrate(a_prev, a_delta, params, lcfg, tri(l)).data
        np.testing.assert_array_equal(out * ~tri(l), 0.0)

    def test_missing_predecessor(self):
        lcfg = LisaLayerConfig(variant="plus", r_q=2, r_k=2)
        with pytest.raises(ConfigError):
            align_and_integrate(None, Tensor(np.zeros((1, 2, 2))), None, lcfg, tri(2))

    def test_masked_invariance(self):
        # garbage written at masked positions of either input never reaches
        # any unmasked output entry
        h, l = 3, 5
        rng = np.random.default_rng(9)
        a_prev = masked_scores(rng, h, l)
        a_delta = masked_scores(rng, h, l)
        cfg = ModelConfig(n_layers=2, d=24, h=3, h_kv=3, d_k=8, d_ff=8,
                          vocab=4, max_len=8)
        for variant in ("plus", "sl", "dl"):
            lcfg = LisaLayerConfig(variant=variant, ffn_hidden=12, r_q=2, r_k=2)
            params = init_lisa_params(cfg, lcfg, np.random.default_rng(10))
            base = align_and_integrate(Tensor(a_prev), Tensor(a_delta), params,
                                       lcfg, tri(l)).data
            noisy_prev = a_prev + np.where(tri(l), 0.0, 123.0)
            noisy_delta = a_delta + np.where(tri(l), 0.0, -77.0)
            again = align_and_integrate(Tensor(noisy_prev), Tensor(noisy_delta),
                                        params, lcfg, tri(l)).data
            np.testing.assert_array_equal(base, again)


class TestLisaScores:
    def test_plus_zero_lr_equals_ds(self):
        rng = np.random.default_rng(11)
        l = 5
        a_prev = Tensor(masked_scores(rng, CFG.h, l))
        lcfg = LisaLayerConfig(variant="plus", r_q=2, r_k=2)
        params = LisaParams(Tensor(np.zeros((CFG.d, CFG.h * 2))),
                            Tensor(np.zeros((CFG.d, CFG.h_kv * 2))))
        h_state = Tensor(rng.standard_normal((l, CFG.d)))
        cos, sin = rope_for(l, 2)
        out = lisa_scores(h_state, a_prev, params, lcfg, CFG, cos, sin, tri(l))
        np.testing.assert_array_equal(out.data, ds_scores(a_prev).data)

    def test_dl_well_formed(self):
        rng = np.random.default_rng(12)
        l = 6
        lcfg = LisaLayerConfig(variant="dl", ffn_hidden=16, r_q=2, r_k=2)
        params = init_lisa_params(CFG, lcfg, rng)
        for _, t in params.tensors():
            t.data += rng.standard_normal(t.shape) * 0.5
        a_prev = Tensor(masked_scores(rng, CFG.h, l))
        h_state = Tensor(rng.standard_normal((l, CFG.d)))
        cos, sin = rope_for(l, 2)
        out = lisa_scores(h_state, a_prev, params, lcfg, CFG, cos, sin, tri(l)).data
        assert np.isfinite(out).all()
        np.testing.assert_array_equal(out * ~tri(l), 0.0)

    def test_composed_oracle(self):
        # flattened single-expression evaluation of the sl variant
        rng = np.random.default_rng(13)
        l = 3
        cfg = ModelConfig(n_layers=2, d=8, h=2, h_kv=2, d_k=4, d_ff=8,
                          vocab=4, max_len=8)
        lcfg = LisaLayerConfig(variant="sl", r_q=2, r_k=2)
        wq = rng.standard_normal((8, 4))
        wk = rng.standard_normal((8, 4))
        w = rng.standard_normal((4, 2))
        params = LisaParams(Tensor(wq), Tensor(wk), align_w=Tensor(w))
        a_prev_np = masked_scores(rng, 2, l)
        h_np = rng.standard_normal((l, 8))
        cos, sin = rope_tables(np.arange(l), 2, cfg.rope_base)
        got = lisa_scores(Tensor(h_np), Tensor(a_prev_np), params, lcfg, cfg,
                          cos, sin, tri(l)).data

        def rope_np(x):
            y = np.empty_like(x)
            y[..., 0::2] = x[..., 0::2] * cos - x[..., 1::2] * sin
            y[..., 1::2] = x[..., 0::2] * sin + x[..., 1::2] * cos
            return y

        q = rope_np((h_np @ wq).reshape(l, 2, 2).transpose(1, 0, 2))
        k = rope_np((h_np @ wk).reshape(l, 2, 2).transpose(1, 0, 2))
        delta = np.where(tri(l), q @ k.transpose(0, 2, 1) / np.sqrt(2), 0.0)
        want = np.zeros((2, l, l))
        for i in range(l):
            for j in range(i + 1):
                channels = np.concatenate([a_prev_np[:, i, j], delta[:, i, j]])
                want[:, i, j] = w.T @ channels
        np.testing.assert_allclose(got, want, atol=1e-10)


class TestDsAvg:
    def test_ds_identity(self):
        a = Tensor(np.ones((2, 3, 3)))
        assert ds_scores(a) is a

    def test_ds_layer0_error(self):
        with pytest.raises(ConfigError):
            ds_scores(None)

    def test_avg_first_row(self):
        p = uniform_attention(4)
        np.testing.assert_array_equal(p[0], [1.0, 0.0, 0.0, 0.0])

    def test_avg_running_mean(self):
        p = uniform_attention(2)
        v = np.array([[1.0, 3.0], [5.0, 7.0]])
        pv = p @ v
        np.testing.assert_array_equal(pv[0], v[0])
        np.testing.assert_array_equal(pv[1], (v[0] + v[1]) / 2)

    def test_avg_rows_sum_to_one(self):
        # entries are bit-exactly 1/(t+1); their float sum is 1 up to one
        # ulp depending on summation order
        p = uniform_attention(17)
        for t in range(17):
            np.testing.assert_array_equal(p[t, :t + 1], 1.0 / (t + 1))
        np.testing.assert_allclose(p.sum(-1), np.ones(17), atol=1e-15)


class TestGradients:
    def test_grad_flow_all_variants(self):
        rng = np.random.default_rng(14)
        l = 4
        cfg = ModelConfig(n_layers=2, d=12, h=2, h_kv=2, d_k=6, d_ff=8,
                          vocab=4, max_len=8)
        for variant in ("plus", "sl", "dl"):
            lcfg = LisaLayerConfig(variant=variant, ffn_hidden=6, r_q=2, r_k=2)
            params = init_lisa_params(cfg, lcfg, rng)
            for _, t in params.tensors():
                t.data = rng.standard_normal(t.shape) * 0.3
                t.requires_grad = True
            a_prev = Tensor(masked_scores(rng, cfg.h, l))
            h_state = Tensor(rng.standard_normal((l, cfg.d)))
            cos, sin = rope_tables(np.arange(l), 2, cfg.rope_base)
            target = Tensor(masked_scores(rng, cfg.h, l))

            def f():
                from attnshare.tensor import huber_elem, tensor_mean
                a = lisa_scores(h_state, a_prev, params, lcfg, cfg, cos, sin, tri(l))
                return tensor_mean(huber_elem(a, target, 1.0))

            err = grad_check(f, [t for _, t in params.tensors()])
            assert err < 1e-4, f"{variant}: {err}"
