"""Translation scores and the statistics used to compare systems."""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass
from typing import Hashable, Mapping, Sequence

import numpy as np

from .corpus import Vocabulary, detect_language
from .errors import DegenerateInputError, InvalidInputError
from .linalg import pearson


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@dataclass(frozen=True)
class BleuStats:
    score: float
    precisions: tuple[float, ...]
    brevity_penalty: float
    hyp_len: int
    ref_len: int


def bleu_stats(hypotheses: Sequence[Sequence], references: Sequence[Sequence],
               max_order: int = 4) -> BleuStats:
    if len(hypotheses) != len(references):
        raise InvalidInputError(
            f"{len(hypotheses)} hypotheses but {len(references)} references")
    if not hypotheses:
        raise DegenerateInputError("BLEU of an empty corpus is undefined")
    matches = np.zeros(max_order)
    totals = np.zeros(max_order)
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    precisions = tuple(float(m / t) if t > 0 else 0.0 for m, t in zip(matches, totals))
    if hyp_len == 0:
        bp = 0.0
    else:
        bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    if min(precisions) == 0.0:
        warnings.warn("an n-gram precision is zero; corpus BLEU is 0", RuntimeWarning, stacklevel=2)
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / max_order)
    return BleuStats(score, precisions, bp, hyp_len, ref_len)


def corpus_bleu(hypotheses: Sequence[Sequence], references: Sequence[Sequence],
                max_order: int = 4) -> float:
    """Corpus BLEU in [0, 100] over token sequences, without smoothing."""
    return bleu_stats(hypotheses, references, max_order).score


def token_accuracy(hypotheses: Sequence[Sequence], references: Sequence[Sequence]) -> float:
    """Position-wise matches over the longer of each hypothesis/reference pair."""
    if len(hypotheses) != len(references):
        raise InvalidInputError("hypotheses and references differ in count")
    num = den = 0
    for hyp, ref in zip(hypotheses, references):
        num += sum(a == b for a, b in zip(hyp, ref))
        den += max(len(hyp), len(ref))
    return num / den if den else 1.0


def off_target_ratio(hypotheses: Sequence[Sequence[int]], expected_lang: int | Sequence[int],
                     vocab: Vocabulary) -> float:
    """Share of hypotheses whose detected language is not the requested one.

    ``expected_lang`` is one language id or one id per hypothesis.  An
    undetectable hypothesis counts as off target.
    """
    if not hypotheses:
        return 0.0
    if isinstance(expected_lang, (int, np.integer)):
        expected = [int(expected_lang)] * len(hypotheses)
    else:
        expected = list(expected_lang)
        if len(expected) != len(hypotheses):
            raise InvalidInputError("one expected language per hypothesis required")
    off = sum(detect_language(h, vocab) != e for h, e in zip(hypotheses, expected))
    return off / len(hypotheses)


def cluster_variance(vectors, labels: Sequence[Hashable],
                     clusters: Sequence[Hashable] | None = None) -> float:
    """Mean over clusters of the mean squared distance to the centroid.

    Vectors are scaled to unit length first.  ``clusters`` lists the labels
    that must be present; a listed label with no members is an error.
    """
    x = np.asarray(vectors, dtype=np.float64)
    labels = list(labels)
    if x.ndim != 2 or x.shape[0] != len(labels):
        raise InvalidInputError("need a 2-D array with one label per row")
    if x.shape[0] == 0:
        raise DegenerateInputError("no vectors to cluster")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateInputError("zero vector cannot be length-normalised")
    x = x / norms
    names = list(dict.fromkeys(labels)) if clusters is None else list(clusters)
    lab = np.array([names.index(l) if l in names else -1 for l in labels])
    spreads = []
    for i, name in enumerate(names):
        members = x[lab == i]
        if len(members) == 0:
            raise DegenerateInputError(f"cluster {name!r} is empty")
        spreads.append(np.mean(np.sum((members - members.mean(axis=0)) ** 2, axis=1)))
    return float(np.mean(spreads))


@dataclass(frozen=True)
class CorrelationEntry:
    group: str
    n: int
    r: float
    p: float
    skipped: bool = False


def correlation_report(delta_bleu: Mapping[tuple[str, str], float],
                       svcca: Mapping[tuple[str, str], float],
                       group_by_target: bool = True, min_size: int = 3
                       ) -> dict[str, CorrelationEntry]:
    """Pearson r and p of (svcca, BLEU gain) per target-language group.

    Keys are ``(source, target)`` pairs present in both mappings.  Groups with
    fewer than ``min_size`` pairs are returned with ``skipped=True`` and NaNs.
    """
    common = [k for k in delta_bleu if k in svcca]
    groups: dict[str, list[tuple[str, str]]] = {}
    for key in sorted(common):
        groups.setdefault(key[1] if group_by_target else "all", []).append(key)
    report = {}
    for name, keys in groups.items():
        if len(keys) < min_size:
            report[name] = CorrelationEntry(name, len(keys), math.nan, math.nan, skipped=True)
            continue
        r, p = pearson([svcca[k] for k in keys], [delta_bleu[k] for k in keys])
        report[name] = CorrelationEntry(name, len(keys), r, p)
    return report


def bootstrap_significance(scores_a: Sequence[float], scores_b: Sequence[float],
                           iterations: int = 1000, ratio: float = 0.5, seed: int = 0) -> float:
    """Paired bootstrap p-value for "b is not better than a".

    Each resample draws ``round(ratio * n)`` sentence indices with
    replacement; p is the share of resamples where b's mean is at least a's.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidInputError("paired score lists must have equal length")
    if a.size == 0:
        raise DegenerateInputError("no scores to resample")
    if iterations < 1 or not 0.0 < ratio <= 1.0:
        raise InvalidInputError("iterations >= 1 and 0 < ratio <= 1 required")
    m = max(1, int(round(ratio * a.size)))
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, a.size, size=(iterations, m))
    wins = int(np.count_nonzero(b[idx].mean(axis=1) >= a[idx].mean(axis=1)))
    return wins / iterations
