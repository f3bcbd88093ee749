import math
import warnings

import numpy as np
import pytest

from ztrans.corpus import make_languages
from ztrans.errors import DegenerateInputError, InvalidInputError
from ztrans.metrics import (bleu_stats, bootstrap_significance, cluster_variance, corpus_bleu,
                            correlation_report, off_target_ratio, token_accuracy)


class TestBleu:
    def test_hand_case(self):
        """Precisions 4/5, 3/4, 2/3, 1/2 with equal lengths."""
        score = corpus_bleu([list("abcde")], [list("abcdf")])
        ref = 100 * (0.8 * 0.75 * (2 / 3) * 0.5) ** 0.25
        assert abs(score - ref) < 1e-12
        assert score == pytest.approx(66.87, abs=0.01)

    def test_perfect_and_reflexive(self):
        corpus = [[5, 6, 7, 8], [9, 10, 11, 12, 13], [5, 9, 5, 9]]
        assert corpus_bleu(corpus, corpus) == pytest.approx(100.0, abs=1e-12)

    def test_brevity_penalty(self):
        st = bleu_stats([[1, 2, 3, 4]], [[1, 2, 3, 4, 5, 6, 7, 8]])
        assert st.brevity_penalty == pytest.approx(math.exp(-1.0))
        assert st.score == pytest.approx(100 * math.exp(-1.0))

    def test_clipping(self):
        st = bleu_stats([[7, 7, 7, 7]], [[7, 1, 2, 3]], max_order=1)
        assert st.precisions == (0.25,)

    def test_zero_precision_warns(self):
        with pytest.warns(RuntimeWarning):
            assert corpus_bleu([[1, 2]], [[3, 4]]) == 0.0

    def test_adding_exact_pair_never_lowers(self):
        rng = np.random.default_rng(0)
        refs = [list(rng.integers(5, 12, size=6)) for _ in range(8)]
        hyps = [r[:3] + list(rng.integers(5, 12, size=3)) for r in refs]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            base = corpus_bleu(hyps, refs)
            extra = [5, 6, 7, 8, 9, 10]
            assert corpus_bleu(hyps + [extra], refs + [extra]) >= base
            assert 0.0 <= base <= 100.0

    def test_errors(self):
        with pytest.raises(DegenerateInputError):
            corpus_bleu([], [])
        with pytest.raises(InvalidInputError):
            corpus_bleu([[1]], [[1], [2]])


class TestTokenAccuracy:
    def test_cases(self):
        assert token_accuracy([[1, 2, 3]], [[1, 2, 3]]) == 1.0
        assert token_accuracy([[1, 9, 3]], [[1, 2, 3]]) == pytest.approx(2 / 3)
        assert token_accuracy([[1, 2]], [[1, 2, 3, 4]]) == 0.5
        assert token_accuracy([[1, 2, 3, 4]], [[1, 2]]) == 0.5


class TestOffTarget:
    vocab = make_languages(3, 10)

    def _sent(self, lang):
        base = self.vocab.languages[lang].vocab_offset
        return [base, base + 1, base + 2]

    def test_all_on_target(self):
        assert off_target_ratio([self._sent(2)] * 4, 2, self.vocab) == 0.0

    def test_all_wrong(self):
        assert off_target_ratio([self._sent(1)] * 4, 2, self.vocab) == 1.0

    def test_three_of_five(self):
        hyps = [self._sent(2)] * 3 + [self._sent(0), []]
        assert off_target_ratio(hyps, 2, self.vocab) == 0.4

    def test_per_hypothesis_expectation(self):
        hyps = [self._sent(0), self._sent(1)]
        assert off_target_ratio(hyps, [0, 1], self.vocab) == 0.0
        with pytest.raises(InvalidInputError):
            off_target_ratio(hyps, [0], self.vocab)


class TestClusterVariance:
    def test_identical_points(self):
        assert cluster_variance(np.ones((4, 3)), ["a"] * 4) == 0.0

    def test_unit_separated_pair(self):
        """Two unit vectors 60 degrees apart sit at distance 1; each is 1/2 from the centroid."""
        pts = [[1.0, 0.0], [0.5, math.sqrt(3) / 2]]
        assert cluster_variance(pts, [0, 0]) == pytest.approx(0.25, abs=1e-15)

    def test_length_normalised(self):
        pts = [[3.0, 0.0], [0.5, math.sqrt(3) / 2]]
        assert cluster_variance(pts, [0, 0]) == pytest.approx(0.25, abs=1e-15)

    def test_merging_clusters_increases(self):
        rng = np.random.default_rng(1)
        a = np.array([1.0, 0.0]) + 0.05 * rng.normal(size=(10, 2))
        b = np.array([0.0, 1.0]) + 0.05 * rng.normal(size=(10, 2))
        x = np.vstack([a, b])
        split = cluster_variance(x, [0] * 10 + [1] * 10)
        assert cluster_variance(x, [0] * 20) > split

    def test_empty_cluster(self):
        with pytest.raises(DegenerateInputError):
            cluster_variance(np.eye(2), ["a", "a"], clusters=["a", "b"])


class TestCorrelation:
    def test_grouping(self):
        sv = {("l1", "en"): 1.0, ("l2", "en"): 2.0, ("l3", "en"): 3.0, ("l4", "en"): 4.0,
              ("l1", "l2"): 1.0, ("l3", "l2"): 2.0, ("l4", "l2"): 3.0, ("en", "l3"): 0.5}
        gain = {("l1", "en"): 1.0, ("l2", "en"): 3.0, ("l3", "en"): 2.0, ("l4", "en"): 4.0,
                ("l1", "l2"): 3.0, ("l3", "l2"): 2.0, ("l4", "l2"): 1.0, ("en", "l3"): 9.0}
        rep = correlation_report(gain, sv)
        assert abs(rep["en"].r - 0.8) <= 1e-12 and rep["en"].n == 4
        assert rep["l2"].r == pytest.approx(-1.0, abs=1e-14)
        assert rep["l3"].skipped and math.isnan(rep["l3"].r)

    def test_self_correlation(self):
        d = {("a", "x"): 1.0, ("b", "x"): 5.0, ("c", "x"): 2.0}
        assert correlation_report(d, d)["x"].r == pytest.approx(1.0, abs=1e-14)

    def test_pooled(self):
        d = {("a", "x"): 1.0, ("b", "y"): 5.0, ("c", "z"): 2.0}
        rep = correlation_report(d, d, group_by_target=False)
        assert list(rep) == ["all"] and rep["all"].n == 3


class TestBootstrap:
    def test_ties_give_one(self):
        s = np.random.default_rng(0).uniform(size=40)
        assert bootstrap_significance(s, s) == 1.0

    def test_a_always_better_gives_zero(self):
        s = np.random.default_rng(1).uniform(size=40)
        assert bootstrap_significance(s + 0.01, s) == 0.0

    def test_seeded_and_on_grid(self):
        rng = np.random.default_rng(2)
        a, b = rng.uniform(size=60), rng.uniform(size=60)
        p = bootstrap_significance(a, b, iterations=200, seed=5)
        assert p == bootstrap_significance(a, b, iterations=200, seed=5)
        assert 0.0 < p < 1.0
        assert (p * 200) == int(p * 200)

    def test_clear_improvement_is_significant(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(size=100)
        assert bootstrap_significance(a, a + 0.2 + 0.05 * rng.normal(size=100)) == 1.0
        assert bootstrap_significance(a + 0.2, a) < 0.05

    def test_unpaired(self):
        with pytest.raises(InvalidInputError):
            bootstrap_significance([1.0, 2.0], [1.0])
