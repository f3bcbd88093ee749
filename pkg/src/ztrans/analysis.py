"""Model-level analyses: layer-wise comparison cases, evaluation and exports."""

from __future__ import annotations

import csv
import enum
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .corpus import DatasetSplits, TaggedExample, Vocabulary, atomic_write_text
from .decoding import DEFAULT_BEAM, beam_search, greedy_decode
from .errors import DegenerateInputError, InvalidInputError
from .linalg import SpectralEmbedding, spectral_embedding
from .metrics import corpus_bleu, off_target_ratio, token_accuracy
from .model import ModelParams, TransformerConfig, encode, forward_teacher_forced
from .svcca import (DEFAULT_REGULARIZATION, DEFAULT_THRESHOLD, PooledSet, SvccaReport,
                    fit_svcca, pooled_set, svcca_score)

Triple = tuple[Sequence[int], int, Sequence[int]]


class ComparisonCase(enum.Enum):
    """Which two triple patterns are compared; x is in language a, y in language b."""

    I = "i"  # (x, l_a, x) vs (y, l_a, x): target-language features
    II = "ii"  # (x, l_a, x) vs (x, l_b, y): source-language features
    III = "iii"  # (x, l_a, x) vs (y, l_b, y): two identities
    IV = "iv"  # (x, l_b, y) vs (x', l_b, y'), x' far from x in the encoder
    V = "v"  # (x, l_b, y) vs (y, l_b, y): shared semantics

    @property
    def default_side(self) -> str:
        return "decoder" if self in (ComparisonCase.IV, ComparisonCase.V) else "encoder"

    @classmethod
    def parse(cls, name: "str | ComparisonCase") -> "ComparisonCase":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            raise InvalidInputError(f"unknown comparison case {name!r}; use i, ii, iii, iv or v") from None


def aligned_sentences(dataset: DatasetSplits, lang: int, split: str = "test_identity") -> list[tuple[int, ...]]:
    """Sentences of ``lang`` ordered by meaning, taken from the identity split."""
    rows = sorted((ex.sent_id, ex.source) for ex in dataset[split] if ex.src_lang == lang)
    if not rows:
        raise DegenerateInputError(f"split {split!r} has no sentences for language {lang}")
    return [src for _, src in rows]


def collect_pooled(params: ModelParams, config: TransformerConfig, triples: Sequence[Triple],
                   side: str, exclude_tag: bool = True, batch_size: int = 200
                   ) -> dict[int, PooledSet]:
    """Pooled states for every layer output of ``side`` (0 = embeddings)."""
    if side not in ("encoder", "decoder"):
        raise InvalidInputError(f"side must be 'encoder' or 'decoder', got {side!r}")
    if not triples:
        raise DegenerateInputError("no sentences to pool")
    chunks: dict[int, list[np.ndarray]] = {}
    with ad.no_grad():
        for i in range(0, len(triples), batch_size):
            part = triples[i:i + batch_size]
            if side == "encoder":
                out = encode(params, config, [s for s, _, _ in part], [t for _, t, _ in part],
                             trace=True)
            else:
                batch = [TaggedExample(tuple(s), t, tuple(y), -1, -1) for s, t, y in part]
                out, _ = forward_teacher_forced(params, config, batch, trace=True)
            for tr in out.traces:
                if tr.side == side and tr.capture == "output":
                    chunks.setdefault(tr.layer, []).append(pooled_set(tr, exclude_tag).vectors)
    has_tag = side == "encoder"
    return {layer: PooledSet(np.concatenate(parts), side, layer, "output", exclude_tag and has_tag)
            for layer, parts in chunks.items()}


def _case_triples(case: ComparisonCase, xs, ys, tag_a: int, tag_b: int
                  ) -> tuple[list[Triple], list[Triple]]:
    if case is ComparisonCase.I:
        return [(x, tag_a, x) for x in xs], [(y, tag_a, x) for x, y in zip(xs, ys)]
    if case is ComparisonCase.II:
        return [(x, tag_a, x) for x in xs], [(x, tag_b, y) for x, y in zip(xs, ys)]
    if case is ComparisonCase.III:
        return [(x, tag_a, x) for x in xs], [(y, tag_b, y) for y in ys]
    base = [(x, tag_b, y) for x, y in zip(xs, ys)]
    if case is ComparisonCase.V:
        return base, [(y, tag_b, y) for y in ys]
    return base, base  # IV: the second set is a permutation of the base, chosen later


def distant_partners(params: ModelParams, config: TransformerConfig, triples: Sequence[Triple],
                     threshold: float = DEFAULT_THRESHOLD,
                     regularization: float = DEFAULT_REGULARIZATION) -> np.ndarray:
    """For each sentence, the other sentence least similar to it at the encoder output.

    Similarity is the cosine between SVCCA-projected pooled encoder states,
    with the projection fitted on the set itself.
    """
    if len(triples) < 2:
        raise DegenerateInputError("partner selection needs at least 2 sentences")
    pooled = collect_pooled(params, config, triples, "encoder")[config.enc_layers]
    fit = fit_svcca(pooled, pooled, threshold, regularization)
    z = fit.project_a(pooled.vectors)
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    z = z / np.where(norms > 0, norms, 1.0)
    sim = z @ z.T
    np.fill_diagonal(sim, np.inf)
    return np.argmin(sim, axis=1)


def run_comparison(params: ModelParams, config: TransformerConfig, dataset: DatasetSplits,
                   case: "ComparisonCase | str", lang_a: int, lang_b: int,
                   side: str | None = None, layers: Sequence[int] | None = None,
                   exclude_tag: bool = True, limit: int | None = None,
                   threshold: float = DEFAULT_THRESHOLD,
                   regularization: float = DEFAULT_REGULARIZATION) -> list[SvccaReport]:
    """One SVCCA report per requested layer (default: every layer output, 1..L)."""
    case = ComparisonCase.parse(case)
    if lang_a == lang_b:
        raise InvalidInputError("comparison languages must differ")
    side = side or case.default_side
    depth = config.enc_layers if side == "encoder" else config.dec_layers
    layers = list(range(1, depth + 1)) if layers is None else list(layers)
    bad = [l for l in layers if not 0 <= l <= depth]
    if bad:
        raise InvalidInputError(f"{side} layers must lie in 0..{depth}, got {bad}")
    xs = aligned_sentences(dataset, lang_a)
    ys = aligned_sentences(dataset, lang_b)
    n = min(len(xs), len(ys)) if limit is None else min(limit, len(xs), len(ys))
    xs, ys = xs[:n], ys[:n]
    tags = [lang.tag_token for lang in dataset.vocab.languages]
    first, second = _case_triples(case, xs, ys, tags[lang_a], tags[lang_b])
    set_a = collect_pooled(params, config, first, side, exclude_tag)
    if case is ComparisonCase.IV:
        partner = distant_partners(params, config, first, threshold, regularization)
        set_b = {layer: s.subset(partner) for layer, s in set_a.items()}
    else:
        set_b = collect_pooled(params, config, second, side, exclude_tag)
    reports = []
    for layer in layers:
        rep = svcca_score(set_a[layer], set_b[layer], threshold, regularization)
        rep.layer = layer
        rep.label = f"{case.value}:{side}"
        reports.append(rep)
    return reports


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    bleu: float
    accuracy: float
    off_target: float
    hypotheses: list[list[int]] = field(repr=False, default_factory=list)


def translate_examples(params: ModelParams, config: TransformerConfig,
                       examples: Sequence[TaggedExample], beam: int = DEFAULT_BEAM,
                       workers: int = 1) -> list[list[int]]:
    """Decode every example; sentence order is preserved whatever ``workers`` is."""
    if beam == 1:
        return greedy_decode(params, config, [ex.source for ex in examples],
                             [ex.tag for ex in examples])

    def one(ex: TaggedExample) -> list[int]:
        return beam_search(params, config, ex.source, ex.tag, beam)

    if workers <= 1:
        return [one(ex) for ex in examples]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, examples))


def evaluate_examples(params: ModelParams, config: TransformerConfig,
                      examples: Sequence[TaggedExample], vocab: Vocabulary,
                      beam: int = DEFAULT_BEAM, workers: int = 1) -> EvalResult:
    if not examples:
        raise DegenerateInputError("cannot evaluate an empty set of examples")
    hyps = translate_examples(params, config, examples, beam, workers)
    refs = [list(ex.target) for ex in examples]
    return EvalResult(bleu=corpus_bleu(hyps, refs), accuracy=token_accuracy(hyps, refs),
                      off_target=off_target_ratio(hyps, [ex.tgt_lang for ex in examples], vocab),
                      hypotheses=hyps)


def identity_eval(params: ModelParams, config: TransformerConfig, dataset: DatasetSplits,
                  lang: int, beam: int = DEFAULT_BEAM, workers: int = 1) -> float:
    """BLEU of reproducing each sentence of ``lang`` under its own tag."""
    examples = [ex for ex in dataset["test_identity"] if ex.src_lang == lang]
    if not examples:
        raise DegenerateInputError(f"no identity pairs for language {lang}")
    return evaluate_examples(params, config, examples, dataset.vocab, beam, workers).bleu


def spectral_coordinates(vectors, dims: int = 2) -> SpectralEmbedding:
    """Laplacian-eigenmap coordinates from the (1 + cosine) / 2 affinity of the rows."""
    x = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateInputError("zero vector has no direction")
    z = x / norms
    sim = (1.0 + np.clip(z @ z.T, -1.0, 1.0)) / 2.0
    return spectral_embedding((sim + sim.T) / 2.0, dims)


# ------------------------------------------------------------------- export


def _num(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _table(report) -> tuple[list[str], list[list], dict]:
    """Header, rows and a JSON document for any exportable report."""
    if isinstance(report, SvccaReport):
        report = [report]
    if isinstance(report, PooledSet):
        d = report.vectors.shape[1]
        rows = [[i, *map(float, v)] for i, v in enumerate(report.vectors)]
        doc = {"kind": "pooled", "side": report.side, "layer": report.layer,
               "capture": report.capture, "exclude_tag": report.exclude_tag,
               "vectors": report.vectors.tolist()}
        return ["index", *(f"f{j}" for j in range(d))], rows, doc
    if isinstance(report, SpectralEmbedding):
        c = report.coordinates
        rows = [[i, *map(float, v)] for i, v in enumerate(c)]
        doc = {"kind": "spectral", "coordinates": c.tolist(),
               "eigenvalues": [float(e) for e in report.eigenvalues],
               "disconnected": report.disconnected, "degenerate": report.degenerate}
        return ["index", *(f"x{j}" for j in range(c.shape[1]))], rows, doc
    if isinstance(report, list) and report and all(isinstance(r, SvccaReport) for r in report):
        header = ["layer", "label", "mean", "n", "dims_a", "dims_b", "dprime", "threshold"]
        rows = [[r.layer, r.label, r.mean, r.n, r.dims_a, r.dims_b, r.dprime, r.threshold]
                for r in report]
        return header, rows, {"kind": "svcca_layers", "reports": [r.to_dict() for r in report]}
    if isinstance(report, list) and report and all(isinstance(r, dict) for r in report):
        header = list(report[0])
        return header, [[r.get(k, "") for k in header] for r in report], {"kind": "table",
                                                                          "rows": report}
    raise InvalidInputError(f"cannot export object of type {type(report).__name__}")


def export_plot_data(report, path: str | os.PathLike, fmt: str | None = None) -> str:
    """Write ``report`` as CSV or JSON (format taken from the suffix by default)."""
    path = os.fspath(path)
    fmt = (fmt or os.path.splitext(path)[1].lstrip(".") or "csv").lower()
    if fmt not in ("csv", "json"):
        raise InvalidInputError(f"unsupported export format {fmt!r}")
    header, rows, doc = _table(report)
    if fmt == "json":
        text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    else:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows([[_num(v) for v in row] for row in rows])
        text = buf.getvalue()
    try:
        atomic_write_text(path, text)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write plot data to {path}: {exc.strerror}") from exc
    return path


def load_plot_data(path: str | os.PathLike):
    """Read back a JSON export; SVCCA layer tables come back as reports."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("kind") == "svcca_layers":
        return [SvccaReport.from_dict(d) for d in doc["reports"]]
    return doc
