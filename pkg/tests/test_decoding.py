import numpy as np
import pytest

from ztrans.decoding import beam_search, default_max_len, greedy_decode, translate
from ztrans.model import TransformerConfig, init_params

SOURCES = [[6, 7, 8], [14, 15], [20, 21, 22, 23], [9]]
TAGS = [4, 5, 3, 4]


@pytest.fixture(scope="module")
def model():
    c = TransformerConfig(vocab_size=30, num_languages=3, enc_layers=1, dec_layers=1,
                          d_model=16, heads=2, d_ffn=16, dropout=0.0, d_e=4, d_h=4)
    return c, init_params(c, 11)


class TestDecoding:
    def test_beam_one_equals_greedy(self, model):
        c, p = model
        greedy = greedy_decode(p, c, SOURCES, TAGS)
        for src, tag, g in zip(SOURCES, TAGS, greedy):
            assert beam_search(p, c, src, tag, beam_size=1) == g

    def test_batched_greedy_matches_single(self, model):
        c, p = model
        batched = greedy_decode(p, c, SOURCES, TAGS)
        for src, tag, b in zip(SOURCES, TAGS, batched):
            assert greedy_decode(p, c, [src], [tag]) == [b]

    def test_deterministic(self, model):
        c, p = model
        assert translate(p, c, SOURCES, TAGS, beam_size=4) == translate(p, c, SOURCES, TAGS, 4)

    def test_outputs_exclude_specials(self, model):
        c, p = model
        for hyp in translate(p, c, SOURCES, TAGS, beam_size=3):
            assert all(t > 2 for t in hyp)
            assert len(hyp) < default_max_len(c, 4)

    def test_length_limit(self, model):
        c, p = model
        out = greedy_decode(p, c, SOURCES, TAGS, max_len=2)
        assert all(len(h) <= 1 for h in out)

    def test_beam_score_not_below_greedy(self, model):
        """Beam search never returns a hypothesis with lower normalised score than greedy."""
        from ztrans.autodiff import no_grad
        from ztrans.corpus import TaggedExample
        from ztrans.model import forward_teacher_forced

        c, p = model

        def score(src, tag, hyp):
            ex = TaggedExample(tuple(src), tag, tuple(hyp), 0, 0, 0, 0)
            with no_grad():
                out, gold = forward_teacher_forced(p, c, [ex])
            lg = out.logits.data[0]
            lp = lg - np.log(np.exp(lg - lg.max(-1, keepdims=True)).sum(-1, keepdims=True)) \
                - lg.max(-1, keepdims=True)
            return lp[np.arange(len(gold[0])), gold[0]].sum() / len(gold[0])

        for src, tag in zip(SOURCES, TAGS):
            g = greedy_decode(p, c, [src], [tag])[0]
            b = beam_search(p, c, src, tag, beam_size=4)
            assert score(src, tag, b) >= score(src, tag, g) - 1e-9

    def test_empty_and_bad_beam(self, model):
        c, p = model
        assert translate(p, c, [], []) == []
        with pytest.raises(ValueError):
            beam_search(p, c, [6], 3, beam_size=0)
