import json
import math

import numpy as np
import pytest

from ztrans import autodiff as ad
from ztrans.autodiff import Tensor, grad_check
from ztrans.corpus import build_dataset
from ztrans.errors import ConfigError, DivergenceError
from ztrans.model import TransformerConfig
from ztrans.training import (Adam, AdamState, LclrBatchView, TrainConfig, adam_step,
                             cross_entropy_loss, lclr_loss, lclr_terms, lr_schedule,
                             pooled_heads, sample_lclr, total_loss, train, validation_ce)


def _view(heads, langs, uids=None, seed=0):
    heads = np.asarray(heads, dtype=float)
    uids = np.arange(len(langs)) if uids is None else np.asarray(uids)
    return LclrBatchView(Tensor(heads, requires_grad=True), np.asarray(langs), uids, seed)


class TestCrossEntropy:
    def test_uniform_logits(self):
        ce = cross_entropy_loss(Tensor(np.zeros((2, 3, 4))), np.array([[1, 2, 3], [3, 1, 0]]))
        assert abs(ce.item() - math.log(4)) <= 1e-12

    def test_uniform_logits_with_smoothing(self):
        ce = cross_entropy_loss(Tensor(np.zeros((1, 2, 50))), np.array([[7, 9]]), smoothing=0.1)
        assert abs(ce.item() - math.log(50)) <= 1e-12

    def test_confident_logit(self):
        ce = cross_entropy_loss(Tensor(np.array([[[10.0, 0, 0, 0]]])), np.array([[0]]),
                                mask=np.array([[True]]))
        assert ce.item() == pytest.approx(math.log(1 + 3 * math.exp(-10)), abs=1e-15)
        assert ce.item() == pytest.approx(1.36e-4, rel=1e-2)

    def test_smoothing_closed_form(self):
        eps, v = 0.1, 4
        logits = np.array([[[10.0, 0, 0, 0]]])
        lse = 10 + math.log(1 + 3 * math.exp(-10))
        logp = logits[0, 0] - lse
        q = np.full(v, eps / v)
        q[0] += 1 - eps
        ref = -(q * logp).sum()
        ce = cross_entropy_loss(Tensor(logits), np.array([[0]]), eps, mask=np.array([[True]]))
        assert abs(ce.item() - ref) <= 1e-10

    def test_matches_plain_nll(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(3, 5, 7))
        targets = rng.integers(1, 7, size=(3, 5))
        targets[0, 3:] = 0
        mask = targets != 0
        lp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
        nll = -np.take_along_axis(lp, targets[..., None], -1)[..., 0][mask].mean()
        assert abs(cross_entropy_loss(Tensor(logits), targets).item() - nll) <= 1e-12

    def test_gradient(self):
        x = Tensor(np.random.default_rng(1).normal(size=(2, 3, 5)), requires_grad=True)
        t = np.array([[1, 2, 0], [4, 4, 3]])
        assert grad_check(lambda a: cross_entropy_loss(a, t, 0.1), x) < 1e-7


class TestLclr:
    def test_equal_similarities(self):
        langs = [0, 0, 1, 1, 1]
        view = _view(np.ones((5, 3)), langs)
        sample = sample_lclr(view.langs, view.uids, 30, 0)
        terms = lclr_terms(view.heads, sample).data
        np.testing.assert_allclose(terms, np.log1p(sample.k_eff), atol=1e-12)
        assert sample.k_eff == [3, 3, 2, 2, 2]
        total = lclr_loss(view, 30).item()
        assert abs(total - (2 * math.log(4) + 3 * math.log(3))) <= 1e-12

    def test_single_negative(self):
        heads = [[1.0, 0.0], [2.0, 0.0], [-1.0, 0.0], [-3.0, 0.0]]
        view = _view(heads, [0, 0, 1, 1])
        for red, scale in (("mean", 1), ("sum", 4)):
            got = lclr_loss(view, 1, red).item()
            assert abs(got - scale * math.log1p(math.exp(-2))) <= 1e-12
        assert math.log1p(math.exp(-2)) == pytest.approx(0.12693, abs=1e-5)

    def test_unique_languages_give_zero(self):
        view = _view(np.eye(3), [0, 1, 2])
        assert len(sample_lclr(view.langs, view.uids, 5, 0).anchors) == 0
        assert lclr_loss(view, 5).item() == 0.0

    def test_single_shared_language_gives_zero(self):
        view = _view(np.eye(3), [1, 1, 1])
        assert lclr_loss(view, 5).item() == 0.0

    def test_k_clipped(self):
        sample = sample_lclr(np.array([0, 0, 0, 1, 1]), np.arange(5), 30, 0)
        assert sample.k_eff[:3] == [2, 2, 2]

    def test_singletons_dropped(self):
        sample = sample_lclr(np.array([0, 0, 1, 2, 2]), np.arange(5), 30, 0)
        assert 2 not in sample.anchors
        assert all(2 not in n for n in sample.negatives)

    def test_positives_and_negatives(self):
        langs = np.array([0, 1, 0, 1, 2, 2, 0])
        sample = sample_lclr(langs, np.arange(7) * 3 + 1, 2, 5)
        for a, p, negs in zip(sample.anchors, sample.positives, sample.negatives):
            assert p != a and langs[p] == langs[a]
            assert len(set(negs)) == len(negs) == 2
            assert all(langs[n] != langs[a] for n in negs)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(3)
        heads = rng.normal(size=(8, 4))
        langs = np.array([0, 1, 2, 0, 1, 2, 0, 1])
        uids = np.array([40, 11, 5, 17, 23, 8, 31, 2])
        perm = rng.permutation(8)
        a = lclr_loss(_view(heads, langs, uids, seed=9), 3).item()
        b = lclr_loss(_view(heads[perm], langs[perm], uids[perm], seed=9), 3).item()
        assert a == pytest.approx(b, abs=1e-12)

    def test_term_bounds(self):
        rng = np.random.default_rng(4)
        view = _view(rng.normal(size=(12, 5)), rng.integers(0, 3, 12), seed=2)
        sample = sample_lclr(view.langs, view.uids, 4, 2)
        terms = lclr_terms(view.heads, sample).data
        k = np.array(sample.k_eff)
        assert np.all(terms >= np.log1p(k * math.exp(-2)) - 1e-12)
        assert np.all(terms <= np.log1p(k * math.exp(2)) + 1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(5)
        view = _view(rng.normal(size=(6, 3)), [0, 1, 0, 1, 2, 2], seed=1)
        assert grad_check(lambda h: lclr_loss(LclrBatchView(h, view.langs, view.uids, 1), 3),
                          view.heads) < 1e-7

    def test_pooling_skips_padding(self):
        states = Tensor(np.arange(24.0).reshape(2, 3, 4))
        mask = np.array([[True, True, False], [True, True, True]])
        pooled = pooled_heads(states, mask, 2).data
        np.testing.assert_allclose(pooled, [[2, 3], [16, 17]])


class TestTotalLoss:
    def test_arithmetic(self):
        assert total_loss(Tensor(1.0), Tensor(0.5)).item() == 1.5
        assert total_loss(Tensor(2.25), Tensor(0.0)).item() == 2.25

    def test_gradient_is_sum(self):
        x = Tensor(np.random.default_rng(6).normal(size=(4, 5)), requires_grad=True)
        t = np.array([[1, 2, 3, 4, 0]] * 4)
        view = LclrBatchView(x, np.array([0, 0, 1, 1]), np.arange(4), 0)
        grads = []
        for f in (lambda: cross_entropy_loss(ad.reshape(x, (1, 4, 5)), t[:1, :4]),
                  lambda: lclr_loss(view, 2),
                  lambda: total_loss(cross_entropy_loss(ad.reshape(x, (1, 4, 5)), t[:1, :4]),
                                     lclr_loss(view, 2))):
            x.zero_grad()
            f().backward()
            grads.append(x.grad.copy())
        np.testing.assert_allclose(grads[2], grads[0] + grads[1], atol=1e-14)
        total = lambda a: total_loss(  # noqa: E731
            cross_entropy_loss(ad.reshape(a, (1, 4, 5)), t[:1, :4]),
            lclr_loss(LclrBatchView(a, view.langs, view.uids, 0), 2))
        assert grad_check(total, x) < 1e-7


class TestSchedule:
    def test_cases(self):
        assert lr_schedule(4000, 5e-4, 4000) == 5e-4
        assert lr_schedule(2000, 5e-4, 4000) == pytest.approx(2.5e-4, rel=1e-15)
        assert lr_schedule(16000, 5e-4, 4000) == pytest.approx(2.5e-4, rel=1e-15)

    def test_continuous_at_peak(self):
        assert lr_schedule(3999, 1.0, 4000) == pytest.approx(lr_schedule(4001, 1.0, 4000), abs=1e-3)

    def test_step_zero(self):
        with pytest.raises(ValueError):
            lr_schedule(0, 1.0, 10)


def _scalar_adam(p, grads, lr, b1=0.9, b2=0.98, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return p


class TestAdam:
    def test_first_step_is_sign(self):
        g = np.array([3.0, -0.01, 250.0])
        p, _ = adam_step(np.zeros(3), g, AdamState(np.zeros(3), np.zeros(3)), 0.1, eps=0.0)
        np.testing.assert_allclose(p, -0.1 * np.sign(g), atol=1e-15)

    def test_zero_gradient_fixed_point(self):
        p = np.array([1.0, -2.0])
        st = AdamState(np.zeros(2), np.zeros(2))
        for _ in range(20):
            p2, st = adam_step(p, np.zeros(2), st, 0.5)
        assert np.array_equal(p2, p)

    def test_matches_scalar_oracle(self):
        grads = [0.3, -1.2, 0.7, 0.05]
        p, st = np.array([0.5]), AdamState(np.zeros(1), np.zeros(1))
        for g in grads:
            p, st = adam_step(p, np.array([g]), st, 0.01)
        assert abs(p[0] - _scalar_adam(0.5, grads, 0.01)) <= 1e-12
        assert st.t == 4

    def test_optimizer_minimises_quadratic(self):
        x = Tensor(np.array([3.0, -2.0]), requires_grad=True)
        opt = Adam({"x": x})
        for _ in range(500):
            x.zero_grad()
            ad.sum(ad.mul(x, x)).backward()
            opt.step(0.05)
        assert np.abs(x.data).max() < 0.05


class TestTrainConfig:
    @pytest.mark.parametrize("bad", [dict(label_smoothing=1.0), dict(warmup_steps=0),
                                     dict(lclr_reduction="max"), dict(temperature=0.5)])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)

    def test_round_trip(self):
        tc = TrainConfig(seed=4, base_lr=1e-3)
        assert TrainConfig.from_dict(tc.to_dict()) == tc


TINY_MODEL = dict(enc_layers=1, dec_layers=1, d_model=16, heads=2, d_ffn=16, dropout=0.1,
                  d_e=4, d_h=4, k=5)


@pytest.fixture(scope="module")
def tiny():
    ds = build_dataset(3, 60, seed=2, valid_per_pair=10, test_per_pair=10)
    mc = TransformerConfig(vocab_size=ds.vocab.size, num_languages=3, lole_enabled=True,
                           lclr_enabled=True, **TINY_MODEL)
    tc = TrainConfig(base_lr=3e-3, warmup_steps=5, max_steps=12, batch_tokens=200, seed=3,
                     log_every=4, checkpoint_every=6)
    return ds, mc, tc


class TestTrainLoop:
    def test_deterministic_logs(self, tiny, tmp_path):
        ds, mc, tc = tiny
        train(mc, tc, ds, tmp_path / "a")
        train(mc, tc, ds, tmp_path / "b")
        a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
        assert a == (tmp_path / "b" / "metrics.jsonl").read_bytes()
        assert (tmp_path / "a" / "best.ztrx").read_bytes() == \
            (tmp_path / "b" / "best.ztrx").read_bytes()
        records = [json.loads(ln) for ln in a.decode().splitlines()]
        assert [r["step"] for r in records] == [4, 8, 12]
        assert set(records[0]) == {"step", "lr", "loss_ce", "loss_ctr", "valid_ce"}
        assert all(r["loss_ctr"] > 0 for r in records)

    def test_best_not_worse_than_start(self, tiny):
        ds, mc, tc = tiny
        res = train(mc, tc, ds)
        assert res.best_valid_ce <= res.initial_valid_ce
        assert validation_ce(res.params, mc, ds["valid"]) == pytest.approx(res.best_valid_ce,
                                                                            abs=1e-12)

    def test_resume_replays_exactly(self, tiny, tmp_path):
        ds, mc, tc = tiny
        full = train(mc, tc, ds, tmp_path / "full")
        short = TrainConfig(**(tc.to_dict() | {"max_steps": 6}))
        train(mc, short, ds, tmp_path / "part")
        resumed = train(mc, tc, ds, tmp_path / "part", resume=True)
        for k in full.final_params:
            assert np.array_equal(full.final_params[k].data, resumed.final_params[k].data)
        assert (tmp_path / "full" / "metrics.jsonl").read_bytes() == \
            (tmp_path / "part" / "metrics.jsonl").read_bytes()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts(self, tiny):
        ds, mc, tc = tiny
        hot = TrainConfig(**(tc.to_dict() | {"base_lr": 1e300, "warmup_steps": 1}))
        with pytest.raises(DivergenceError, match="step"):
            train(mc, hot, ds)


class TestToyConvergence:
    """Four-language toy setup trained for the full 2k steps, one run per seed."""

    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_supervised_accuracy(self, seed):
        from ztrans.analysis import evaluate_examples
        from ztrans.config import ExperimentConfig

        cfg = ExperimentConfig.toy("vanilla", seed).with_overrides(["num_languages=4"])
        d = cfg.data
        ds = build_dataset(d.num_languages, d.sentences_per_pair, d.seed,
                           valid_per_pair=d.valid_per_pair, test_per_pair=d.test_per_pair,
                           length_range=(d.length_min, d.length_max),
                           concept_vocab_size=d.concept_vocab_size)
        mc = cfg.model_config(ds.vocab.size, d.num_languages)
        res = train(mc, cfg.train, ds)
        sup = evaluate_examples(res.params, mc, ds["test_supervised"], ds.vocab, cfg.analysis.beam)
        assert sup.accuracy >= 0.95
