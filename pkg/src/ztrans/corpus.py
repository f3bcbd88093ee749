"""Synthetic multilingual corpora with shared semantics.

A sentence is a sequence of integer *concepts*.  Each synthetic language
renders it by reordering the concepts with a fixed rule and shifting them into
its own disjoint token range, so translation between any two languages is an
exact bijection and the language of any token sequence is recoverable from
vocabulary membership alone.
"""

from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import InvalidTagError

PAD, BOS, EOS = 0, 1, 2
NUM_SPECIALS = 3
ORDER_RULES = ("identity", "reverse", "swap-adjacent-pairs", "rotate-by-one")
SPLITS = ("train", "valid", "test_supervised", "test_zero_shot", "test_identity")


@dataclass(frozen=True)
class SyntheticLanguage:
    id: int
    name: str
    tag_token: int
    vocab_offset: int
    order_rule: str
    concept_vocab_size: int

    def __post_init__(self):
        if self.order_rule not in ORDER_RULES:
            raise ValueError(f"unknown order rule {self.order_rule!r}")

    def owns(self, token: int) -> bool:
        return self.vocab_offset <= token < self.vocab_offset + self.concept_vocab_size


@dataclass(frozen=True)
class TaggedExample:
    source: tuple[int, ...]
    tag: int
    target: tuple[int, ...]
    src_lang: int
    tgt_lang: int
    sent_id: int = -1  # index into the semantic pool of the split
    uid: int = -1  # position in its split; seeds per-example sampling


def apply_rule(concepts: Sequence[int], rule: str) -> list[int]:
    seq = list(concepts)
    if rule == "identity":
        return seq
    if rule == "reverse":
        return seq[::-1]
    if rule == "swap-adjacent-pairs":
        out = seq[:]
        for i in range(0, len(seq) - 1, 2):
            out[i], out[i + 1] = seq[i + 1], seq[i]
        return out
    if rule == "rotate-by-one":
        return seq[1:] + seq[:1]
    raise ValueError(f"unknown order rule {rule!r}")


def invert_rule(seq: Sequence[int], rule: str) -> list[int]:
    seq = list(seq)
    if rule == "rotate-by-one":
        return seq[-1:] + seq[:-1]
    return apply_rule(seq, rule)  # the other rules are involutions


def render(concepts: Sequence[int], language: SyntheticLanguage) -> list[int]:
    if any(not 0 <= c < language.concept_vocab_size for c in concepts):
        raise ValueError("concept outside the language's concept vocabulary")
    return [language.vocab_offset + c for c in apply_rule(concepts, language.order_rule)]


def unrender(tokens: Sequence[int], language: SyntheticLanguage) -> list[int]:
    return invert_rule([t - language.vocab_offset for t in tokens], language.order_rule)


def generate_semantics(count: int, length_range: tuple[int, int], concept_vocab_size: int,
                       seed: int) -> list[list[int]]:
    lo, hi = length_range
    if lo < 2 or hi < lo:
        raise ValueError(f"length_range must satisfy 2 <= min <= max, got {length_range}")
    if concept_vocab_size < 8:
        raise ValueError("concept_vocab_size must be >= 8")
    rng = np.random.default_rng(seed)
    lengths = rng.integers(lo, hi + 1, size=count)
    return [rng.integers(0, concept_vocab_size, size=int(n)).tolist() for n in lengths]


def _unique_semantics(count: int, length_range, concept_vocab_size: int, seed: int) -> list[list[int]]:
    out: list[list[int]] = []
    seen: set[tuple[int, ...]] = set()
    attempt = 0
    while len(out) < count:
        for s in generate_semantics(2 * (count - len(out)) + 8, length_range,
                                    concept_vocab_size, seed + 7919 * attempt):
            key = tuple(s)
            if key not in seen:
                seen.add(key)
                out.append(s)
                if len(out) == count:
                    break
        attempt += 1
        if attempt > 50:
            raise ValueError("semantic space too small for the requested sentence count")
    return out


@dataclass(frozen=True)
class Vocabulary:
    languages: tuple[SyntheticLanguage, ...]

    @property
    def size(self) -> int:
        last = self.languages[-1]
        return last.vocab_offset + last.concept_vocab_size

    @property
    def num_languages(self) -> int:
        return len(self.languages)

    def tag_to_lang(self, tag: int) -> int:
        idx = tag - NUM_SPECIALS
        if not 0 <= idx < len(self.languages):
            raise InvalidTagError(f"token {tag} is not a language tag")
        return idx

    def by_name(self, name: str) -> SyntheticLanguage:
        for lang in self.languages:
            if lang.name == name:
                return lang
        raise InvalidTagError(f"unknown language {name!r}")

    def to_dict(self) -> dict:
        return {"languages": [asdict(lang) for lang in self.languages]}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(tuple(SyntheticLanguage(**lang) for lang in d["languages"]))


def make_languages(num_languages: int, concept_vocab_size: int) -> Vocabulary:
    """Language 0 is the central one ("en"); rules cycle through ORDER_RULES."""
    langs = []
    base = NUM_SPECIALS + num_languages
    for i in range(num_languages):
        langs.append(SyntheticLanguage(
            id=i,
            name="en" if i == 0 else f"l{i}",
            tag_token=NUM_SPECIALS + i,
            vocab_offset=base + i * concept_vocab_size,
            order_rule=ORDER_RULES[i % len(ORDER_RULES)],
            concept_vocab_size=concept_vocab_size,
        ))
    return Vocabulary(tuple(langs))


def detect_language(tokens: Sequence[int], vocab: Vocabulary) -> int | None:
    """Majority language by surface-range membership; None on ties or no votes."""
    votes = Counter()
    for t in tokens:
        for lang in vocab.languages:
            if lang.owns(t):
                votes[lang.id] += 1
                break
    if not votes:
        return None
    ranked = votes.most_common(2)
    if len(ranked) > 1 and ranked[0][1] == ranked[1][1]:
        return None
    return ranked[0][0]


@dataclass
class DatasetSplits:
    vocab: Vocabulary
    splits: dict[str, list[TaggedExample]]
    semantics: dict[str, list[list[int]]] = field(default_factory=dict)

    def __getitem__(self, name: str) -> list[TaggedExample]:
        return self.splits[name]

    @property
    def central(self) -> int:
        return 0

    def pairs(self, split: str) -> dict[tuple[int, int], list[TaggedExample]]:
        out: dict[tuple[int, int], list[TaggedExample]] = {}
        for ex in self.splits[split]:
            out.setdefault((ex.src_lang, ex.tgt_lang), []).append(ex)
        return out

    def pair_counts(self, split: str) -> dict[str, int]:
        names = [lang.name for lang in self.vocab.languages]
        return {f"{names[s]}-{names[t]}": len(v) for (s, t), v in self.pairs(split).items()}


def _examples(pool, directions, vocab: Vocabulary) -> list[TaggedExample]:
    langs = vocab.languages
    out = []
    for s, t in directions:
        for i, sem in enumerate(pool):
            out.append(TaggedExample(
                source=tuple(render(sem, langs[s])), tag=langs[t].tag_token,
                target=tuple(render(sem, langs[t])), src_lang=s, tgt_lang=t,
                sent_id=i, uid=len(out)))
    return out


def build_dataset(num_languages: int, sentences_per_pair: int, seed: int, *,
                  valid_per_pair: int = 100, test_per_pair: int = 100,
                  length_range: tuple[int, int] = (3, 8),
                  concept_vocab_size: int = 20) -> DatasetSplits:
    """English-centric train/valid splits plus supervised, zero-shot and identity tests.

    All pairs of a split share one pool of semantics (multi-way parallel), so
    the i-th example of every direction in a test split means the same thing.
    """
    if num_languages < 3:
        raise ValueError("num_languages must be >= 3")
    vocab = make_languages(num_languages, concept_vocab_size)
    total = sentences_per_pair + valid_per_pair + test_per_pair
    pool = _unique_semantics(total, length_range, concept_vocab_size, seed)
    train_pool = pool[:sentences_per_pair]
    valid_pool = pool[sentences_per_pair:sentences_per_pair + valid_per_pair]
    test_pool = pool[sentences_per_pair + valid_per_pair:]

    others = range(1, num_languages)
    supervised = [d for x in others for d in ((0, x), (x, 0))]
    zero_shot = [(x, y) for x in others for y in others if x != y]
    identity = [(x, x) for x in range(num_languages)]
    splits = {
        "train": _examples(train_pool, supervised, vocab),
        "valid": _examples(valid_pool, supervised, vocab),
        "test_supervised": _examples(test_pool, supervised, vocab),
        "test_zero_shot": _examples(test_pool, zero_shot, vocab),
        "test_identity": _examples(test_pool, identity, vocab),
    }
    semantics = {"train": train_pool, "valid": valid_pool, "test": test_pool}
    return DatasetSplits(vocab=vocab, splits=splits, semantics=semantics)


# --------------------------------------------------------------- sampling


def pair_probabilities(counts: Sequence[int], temperature: float) -> np.ndarray:
    """Temperature-flattened sampling distribution, proportional to q_i ** (1/T)."""
    if temperature < 1:
        raise ValueError("temperature must be >= 1")
    q = np.asarray(counts, dtype=np.float64)
    q = q / q.sum()
    p = q ** (1.0 / temperature)
    return p / p.sum()


class TemperatureSampler:
    """Seeded batch source; ``batch(step)`` depends only on (seed, step)."""

    def __init__(self, examples: Sequence[TaggedExample], temperature: float,
                 batch_tokens: int, seed: int):
        groups: dict[tuple[int, int], list[TaggedExample]] = {}
        for ex in examples:
            groups.setdefault((ex.src_lang, ex.tgt_lang), []).append(ex)
        self.keys = sorted(groups)
        self.groups = [groups[k] for k in self.keys]
        self.probabilities = pair_probabilities([len(g) for g in self.groups], temperature)
        self.batch_tokens = batch_tokens
        self.seed = seed

    def batch(self, step: int) -> list[TaggedExample]:
        rng = np.random.default_rng([self.seed, step])
        out: list[TaggedExample] = []
        longest = 0
        while True:
            g = self.groups[rng.choice(len(self.groups), p=self.probabilities)]
            ex = g[rng.integers(len(g))]
            width = max(longest, len(ex.source) + 1, len(ex.target) + 1)
            if out and width * (len(out) + 1) > self.batch_tokens:
                return out
            out.append(ex)
            longest = width


def temperature_batches(examples: Sequence[TaggedExample], temperature: float,
                        batch_tokens: int, seed: int, start_step: int = 1
                        ) -> Iterator[list[TaggedExample]]:
    sampler = TemperatureSampler(examples, temperature, batch_tokens, seed)
    step = start_step
    while True:
        yield sampler.batch(step)
        step += 1


# ------------------------------------------------------------ persistence


def _fmt(tokens: Sequence[int]) -> str:
    return " ".join(str(t) for t in tokens)


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    """Write via a sibling temp file and rename, so readers never see a partial file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_dataset(data: DatasetSplits, out_dir: str | os.PathLike) -> Path:
    """One ``src<TAB>tag<TAB>tgt`` line per example and a JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, examples in data.splits.items():
        lines = [f"{_fmt(ex.source)}\t{ex.tag}\t{_fmt(ex.target)}\n" for ex in examples]
        atomic_write_text(out / f"{name}.tsv", "".join(lines))
        files[name] = f"{name}.tsv"
    manifest = {
        "format": "ztrans-dataset",
        "version": 1,
        "vocab_size": data.vocab.size,
        "vocabulary": data.vocab.to_dict(),
        "files": files,
        "pair_counts": {name: data.pair_counts(name) for name in data.splits},
    }
    atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out / "manifest.json"


def _parse(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split())


def read_dataset(data_dir: str | os.PathLike) -> DatasetSplits:
    root = Path(data_dir)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    vocab = Vocabulary.from_dict(manifest["vocabulary"])
    splits: dict[str, list[TaggedExample]] = {}
    for name, rel in manifest["files"].items():
        examples = []
        seen: Counter = Counter()
        with open(root / rel, encoding="utf-8") as fh:
            for line in fh:
                src_txt, tag_txt, tgt_txt = line.rstrip("\n").split("\t")
                src, tgt, tag = _parse(src_txt), _parse(tgt_txt), int(tag_txt)
                s = detect_language(src, vocab)
                t = vocab.tag_to_lang(tag)
                examples.append(TaggedExample(src, tag, tgt, s, t, sent_id=seen[(s, t)],
                                              uid=len(examples)))
                seen[(s, t)] += 1
        splits[name] = examples
    return DatasetSplits(vocab=vocab, splits=splits)
