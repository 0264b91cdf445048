"""Training-harness tests: corpus determinism, losses, both training modes."""

import math

import numpy as np
import pytest

from attnshare.config import LisaLayerConfig, ModelConfig, SharingConfig
from attnshare.errors import ConfigError, ContractError
from attnshare.model import Model, causal_mask, init_weights, model_forward
from attnshare.sharing import LisaParams, init_lisa_params
from attnshare.tensor import Tensor
from attnshare.training import (Adam, Corpus, TrainConfig, combined_loss,
                                eval_perplexity, huber, kd_loss, lm_loss,
                                masked_huber, pretrain, uptrain, warmup_lr)

from helpers import reference_forward, synth_corpus_bytes, weights_as_dict


@pytest.fixture(scope="module")
def corpus():
    ids = np.frombuffer(synth_corpus_bytes(8000, seed=2), dtype=np.uint8)
    return Corpus(ids, seq_len=24, holdout_fraction=0.15, seed=5)


class TestCorpus:
    def test_identical_inputs_identical_batches(self):
        raw = synth_corpus_bytes(4000, seed=3)
        ids = np.frombuffer(raw, dtype=np.uint8)
        c1 = Corpus(ids, seq_len=16, seed=9)
        c2 = Corpus(ids.copy(), seq_len=16, seed=9)
        for step in (0, 1, 57):
            np.testing.assert_array_equal(c1.batch(step, 4), c2.batch(step, 4))

    def test_steps_differ(self, corpus):
        assert not np.array_equal(corpus.batch(0, 4), corpus.batch(1, 4))

    def test_window_shapes(self, corpus):
        b = corpus.batch(0, 3)
        assert b.shape == (3, corpus.seq_len + 1)
        hw = corpus.holdout_windows()
        assert hw.shape[1] == corpus.seq_len + 1
        assert len(hw) >= 1

    def test_holdout_disjoint_from_train(self, corpus):
        assert len(corpus.train_ids) + len(corpus.holdout_ids) == len(corpus.ids)


class TestLosses:
    def test_huber_examples(self):
        a, b = Tensor([2.0]), Tensor([2.0])
        assert huber(a, b, 1.0).item() == 0.0
        assert huber(Tensor([0.5]), Tensor([0.0]), 1.0).item() == pytest.approx(0.125)
        assert huber(Tensor([2.0]), Tensor([0.0]), 1.0).item() == pytest.approx(1.5)

    def test_kd_student_equals_teacher(self):
        mask = causal_mask(4)
        a = np.where(mask, np.random.default_rng(0).standard_normal((2, 4, 4)), 0.0)
        loss = kd_loss({3: Tensor(a)}, {3: a.copy()}, 1.0, mask)
        assert loss.item() == 0.0

    def test_kd_single_layer_reduces_to_huber(self):
        rng = np.random.default_rng(1)
        mask = causal_mask(3)
        s = np.where(mask, rng.standard_normal((2, 3, 3)), 0.0)
        t = np.where(mask, rng.standard_normal((2, 3, 3)), 0.0)
        got = kd_loss({1: Tensor(s)}, {1: t}, 1.0, mask).item()
        want = masked_huber(Tensor(s), Tensor(t), 1.0, mask).item()
        assert got == pytest.approx(want, abs=1e-15)

    def test_kd_two_layer_hand_mean(self):
        rng = np.random.default_rng(2)
        mask = causal_mask(3)
        pairs = {}
        hand = []
        for i in (1, 2):
            s = np.where(mask, rng.standard_normal((2, 3, 3)), 0.0)
            t = np.where(mask, rng.standard_normal((2, 3, 3)), 0.0)
            pairs[i] = (s, t)
            hand.append(masked_huber(Tensor(s), Tensor(t), 1.0, mask).item())
        got = kd_loss({i: Tensor(s) for i, (s, t) in pairs.items()},
                      {i: t for i, (s, t) in pairs.items()}, 1.0, mask).item()
        assert abs(got - np.mean(hand)) < 1e-12

    def test_kd_layer_mismatch(self):
        mask = causal_mask(2)
        z = np.zeros((1, 2, 2))
        with pytest.raises(ConfigError):
            kd_loss({1: Tensor(z)}, {2: z}, 1.0, mask)

    def test_combined_affine(self):
        kd, lm = Tensor([2.0]), Tensor([4.0])
        assert combined_loss(kd, lm, 0.0).item() == 4.0
        assert combined_loss(kd, lm, 1.0).item() == 2.0
        assert combined_loss(kd, lm, 0.25).item() == pytest.approx(3.5)

    def test_lm_uniform(self):
        logits = Tensor(np.zeros((6, 17)))
        assert lm_loss(logits, np.zeros(6, int)).item() == pytest.approx(np.log(17))


class TestEvalPerplexity:
    def test_uniform_model_gives_vocab(self, corpus):
        cfg = ModelConfig(n_layers=2, d=8, h=2, h_kv=2, d_k=4, d_ff=8,
                          vocab=258, max_len=64)
        m = Model(cfg, init_weights(cfg, seed=0))
        for _, t in m.weights.named_tensors():
            t.data[...] = 0.0
        assert eval_perplexity(m, corpus, max_windows=2) == pytest.approx(258.0)

    def test_flat_loop_oracle(self, corpus):
        cfg = ModelConfig(n_layers=2, d=16, h=4, h_kv=2, d_k=4, d_ff=24,
                          vocab=258, max_len=64)
        m = Model(cfg, init_weights(cfg, seed=4))
        got = eval_perplexity(m, corpus, max_windows=3)
        w = weights_as_dict(m.weights)
        total, count = 0.0, 0
        for win in corpus.holdout_windows(3):
            logits = reference_forward(win, cfg, w)
            for t in range(len(win) - 1):
                z = logits[t]
                e = np.exp(z - z.max())
                total -= np.log(e[win[t + 1]] / e.sum())
                count += 1
        assert abs(got - math.exp(total / count)) < 1e-8

    def test_aggregation_consistency(self, corpus):
        cfg = ModelConfig(n_layers=1, d=8, h=2, h_kv=2, d_k=4, d_ff=8,
                          vocab=258, max_len=64)
        m = Model(cfg, init_weights(cfg, seed=6))
        ppl = eval_perplexity(m, corpus, max_windows=4)
        losses = [lm_loss(model_forward(w, m).logits, w).item()
                  for w in corpus.holdout_windows(4)]
        assert abs(ppl - math.exp(np.mean(losses))) < 1e-9


def small_teacher(seed=11, n_layers=3):
    cfg = ModelConfig(n_layers=n_layers, d=16, h=4, h_kv=4, d_k=4, d_ff=24,
                      vocab=258, max_len=64)
    return Model(cfg, init_weights(cfg, seed=seed))


def lisa_model_on(teacher, layers, lcfg, seed=13):
    params = {i: init_lisa_params(teacher.config, lcfg,
                                  np.random.default_rng([seed, i]))
              for i in layers}
    sharing = SharingConfig.uniform(layers, "lisa", lcfg)
    return Model(teacher.config, teacher.weights, sharing, params)


class TestUptrain:
    def test_zero_steps_keeps_everything(self, corpus):
        teacher = small_teacher()
        lcfg = LisaLayerConfig(variant="sl", r_q=2, r_k=2)
        m = lisa_model_on(teacher, [2], lcfg)
        before_lisa = {n: t.data.copy() for n, t in m.lisa_params[2].tensors()}
        cfg = TrainConfig(total_steps=0, warmup_steps=0, batch_size=2,
                          seq_len=corpus.seq_len)
        res = uptrain(m, corpus, cfg)
        assert res.base_checksum_before == res.base_checksum_after
        for n, t in m.lisa_params[2].tensors():
            np.testing.assert_array_equal(t.data, before_lisa[n])

    def test_stationary_point(self, corpus):
        # a student constructed to reproduce the teacher's scores exactly:
        # sl alignment selecting only the difference block, full-rank
        # projections equal to the original ones
        teacher = small_teacher(seed=17)
        d_k = teacher.config.d_k
        h = teacher.config.h
        lcfg = LisaLayerConfig(variant="sl", r_q=d_k, r_k=d_k)
        layer = 2
        lw = teacher.weights.layers[layer]
        w = np.zeros((2 * h, h))
        w[h:] = np.eye(h)
        params = LisaParams(Tensor(lw.wq.data.copy()), Tensor(lw.wk.data.copy()),
                            align_w=Tensor(w))
        sharing = SharingConfig.uniform([layer], "lisa", lcfg)
        m = Model(teacher.config, teacher.weights, sharing, {layer: params})
        before = {n: t.data.copy() for n, t in params.tensors()}
        cfg = TrainConfig(total_steps=1, warmup_steps=0, batch_size=2,
                          seq_len=corpus.seq_len, beta=1.0)
        res = uptrain(m, corpus, cfg)
        assert res.log[0].kd == pytest.approx(0.0, abs=1e-15)
        for n, t in params.tensors():
            assert np.max(np.abs(t.data - before[n])) < 1e-12, n

    def test_determinism(self, corpus):
        runs = []
        for _ in range(2):
            teacher = small_teacher(seed=19)
            lcfg = LisaLayerConfig(variant="dl", ffn_hidden=8, r_q=2, r_k=2)
            m = lisa_model_on(teacher, [1, 2], lcfg, seed=23)
            cfg = TrainConfig(total_steps=3, warmup_steps=1, batch_size=2,
                              seq_len=corpus.seq_len)
            res = uptrain(m, corpus, cfg)
            runs.append([(r.lm, r.kd, r.combined, r.lr) for r in res.log])
        assert runs[0] == runs[1]

    def test_kd_decreases(self, corpus):
        teacher = small_teacher(seed=29)
        lcfg = LisaLayerConfig(variant="sl", r_q=2, r_k=2)
        m = lisa_model_on(teacher, [1, 2], lcfg, seed=31)
        cfg = TrainConfig(total_steps=40, warmup_steps=5, batch_size=4,
                          seq_len=corpus.seq_len, lr=3e-3, beta=1.0)
        res = uptrain(m, corpus, cfg)
        first = np.mean([r.kd for r in res.log[:5]])
        last = np.mean([r.kd for r in res.log[-5:]])
        assert last < first

    def test_requires_lisa_layer(self, corpus):
        teacher = small_teacher()
        ds_model = Model(teacher.config, teacher.weights,
                         SharingConfig.uniform([1], "ds"))
        with pytest.raises(ConfigError):
            uptrain(ds_model, corpus, TrainConfig(total_steps=1, warmup_steps=0))


class TestPretrain:
    def test_loss_decreases_and_deterministic(self, corpus):
        cfg = ModelConfig(n_layers=2, d=16, h=2, h_kv=2, d_k=8, d_ff=24,
                          vocab=258, max_len=64)
        tc = TrainConfig(mode="pretrain", total_steps=12, warmup_steps=2,
                         batch_size=4, seq_len=corpus.seq_len, lr=3e-3, seed=7)
        r1 = pretrain(cfg, SharingConfig.all_standard(), corpus, tc)
        r2 = pretrain(cfg, SharingConfig.all_standard(), corpus, tc)
        assert r1.log[-1].lm < r1.log[0].lm
        assert r1.model.weights.checksum() == r2.model.weights.checksum()

    def test_sharing_layers_have_no_qk(self, corpus):
        cfg = ModelConfig(n_layers=3, d=16, h=2, h_kv=2, d_k=8, d_ff=24,
                          vocab=258, max_len=64)
        lcfg = LisaLayerConfig(variant="plus", r_q=2, r_k=2)
        sharing = SharingConfig.uniform([1, 2], "lisa", lcfg)
        tc = TrainConfig(mode="pretrain", total_steps=2, warmup_steps=0,
                         batch_size=2, seq_len=corpus.seq_len, seed=3)
        res = pretrain(cfg, sharing, corpus, tc)
        assert res.model.weights.layers[1].wq is None
        assert res.model.weights.layers[0].wq is not None
        assert np.isfinite(res.log[-1].lm)

    def test_warmup_schedule(self):
        tc = TrainConfig(total_steps=10, warmup_steps=4, lr=1.0)
        assert warmup_lr(0, tc) == 0.25
        assert warmup_lr(3, tc) == 1.0
        assert warmup_lr(9, tc) == 1.0


class TestAdam:
    def test_zero_grad_means_no_movement(self):
        p = Tensor(np.ones(3), requires_grad=True)
        opt = Adam([("p", p)])
        p.grad = np.zeros(3)
        opt.step(lr=0.1)
        np.testing.assert_array_equal(p.data, np.ones(3))

    def test_descends_quadratic(self):
        p = Tensor(np.array([5.0]), requires_grad=True)
        opt = Adam([("p", p)])
        for _ in range(200):
            p.grad = 2 * p.data
            opt.step(lr=0.1)
        assert abs(p.data[0]) < 1e-2
