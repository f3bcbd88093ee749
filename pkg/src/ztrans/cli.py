"""Command-line entry point: ``ztrans <command> ...``.

Exit codes: 0 success, 2 configuration or input error, 3 runtime failure
(including training divergence), 4 file-system or format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import analysis, metrics
from .checkpoint import load_model
from .config import VARIANTS, ExperimentConfig
from .corpus import (DatasetSplits, TaggedExample, Vocabulary, atomic_write_text, build_dataset,
                     make_languages, read_dataset, write_dataset)
from .decoding import DEFAULT_BEAM
from .errors import (ConfigError, ConfigMismatchError, FormatError, InvalidInputError,
                     InvalidTagError, ZtransError)
from .model import TransformerConfig
from .svcca import svcca_score
from .training import train

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("ztrans")


def _workers() -> int:
    raw = os.environ.get("ZTRANS_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"ZTRANS_THREADS must be an integer, got {raw!r}") from None


def _load_config(args) -> ExperimentConfig:
    if getattr(args, "preset", None) == "toy":
        cfg = ExperimentConfig.toy()
    else:
        cfg = ExperimentConfig()
    if getattr(args, "config", None):
        cfg = ExperimentConfig.load(args.config)
    return cfg.with_overrides(getattr(args, "set", None) or [])


def _vocab_for(config: TransformerConfig) -> Vocabulary:
    concept = (config.vocab_size - 3 - config.num_languages) // config.num_languages
    return make_languages(config.num_languages, concept)


def _resolve_tag(text: str, config: TransformerConfig) -> int:
    """Accept a tag token id or a language name such as ``en`` or ``l2``."""
    names = [lang.name for lang in _vocab_for(config).languages]
    if text in names:
        tag = config.first_tag + names.index(text)
    else:
        try:
            tag = int(text)
        except ValueError:
            raise InvalidTagError(f"unknown language tag {text!r}; known: {', '.join(names)}") from None
    config.tag_index(tag)
    return tag


def _resolve_lang(text: str, vocab: Vocabulary) -> int:
    names = [lang.name for lang in vocab.languages]
    if text in names:
        return names.index(text)
    try:
        lang = int(text)
    except ValueError:
        raise InvalidInputError(f"unknown language {text!r}; known: {', '.join(names)}") from None
    if not 0 <= lang < len(names):
        raise InvalidInputError(f"language index {lang} out of range 0..{len(names) - 1}")
    return lang


# ------------------------------------------------------------------ commands


def cmd_init_config(args) -> int:
    cfg = _load_config(args)
    cfg.save(args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise FileExistsError(f"{out} exists and is not empty; pass --force to overwrite")
    d = cfg.data
    data = build_dataset(d.num_languages, d.sentences_per_pair, d.seed,
                         valid_per_pair=d.valid_per_pair, test_per_pair=d.test_per_pair,
                         length_range=(d.length_min, d.length_max),
                         concept_vocab_size=d.concept_vocab_size)
    write_dataset(data, out)
    for split in data.splits:
        print(f"{split}: {len(data[split])} examples")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    variant = args.variant or cfg.variant
    data = read_dataset(args.data)
    model_cfg = cfg.model_config(data.vocab.size, data.vocab.num_languages, variant)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "config.json", cfg.with_overrides([f"variant={json.dumps(variant)}"]).to_json())
    result = train(model_cfg, cfg.train, data, out_dir=out, resume=args.resume)
    print(f"best step {result.best_step}: valid ce {result.best_valid_ce:.4f} "
          f"(step 0: {result.initial_valid_ce:.4f}); checkpoint {out / 'best.ztrx'}")
    return EXIT_OK


def _read_token_lines(path: str) -> list[list[int]]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    try:
        return [[int(t) for t in line.split()] for line in lines]
    except ValueError as exc:
        raise InvalidInputError(f"{path}: lines must hold space-separated token ids ({exc})") from None


def cmd_translate(args) -> int:
    params, config, _ = load_model(args.checkpoint)
    tag = _resolve_tag(args.tag, config)
    sources = _read_token_lines(args.input)
    todo = [i for i, s in enumerate(sources) if s]
    outputs: list[list[int]] = [[] for _ in sources]
    if todo:
        examples = [TaggedExample(tuple(sources[i]), tag, (), -1, -1) for i in todo]
        hyps = analysis.translate_examples(params, config, examples, args.beam, _workers())
        for i, h in zip(todo, hyps):
            outputs[i] = h
    atomic_write_text(args.output, "".join(" ".join(map(str, h)) + "\n" for h in outputs))
    return EXIT_OK


def _read_scores(path: str) -> list[float]:
    with open(path, encoding="utf-8") as fh:
        try:
            return [float(x) for x in fh.read().split()]
        except ValueError as exc:
            raise InvalidInputError(f"{path}: expected one number per line ({exc})") from None


def _layers(text: str, depth: int) -> list[int]:
    if text == "all":
        return list(range(1, depth + 1))
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise InvalidInputError(f"--layers takes 'all' or a comma list of integers, got {text!r}") from None


def _pair_svcca(params, config, data: DatasetSplits, acfg, n: int | None) -> dict[int, float]:
    """Per source language: encoder-output SVCCA of its identity against the central identity."""
    tags = [lang.tag_token for lang in data.vocab.languages]
    central = data.central
    sets = {}
    for lang in range(data.vocab.num_languages):
        xs = analysis.aligned_sentences(data, lang)[:n]
        triples = [(x, tags[lang], x) for x in xs]
        sets[lang] = analysis.collect_pooled(params, config, triples, "encoder",
                                             acfg.exclude_tag)[config.enc_layers]
    return {lang: svcca_score(sets[lang], sets[central], acfg.variance_threshold,
                              acfg.regularization).mean
            for lang in sets}


def _direction_bleu(params, config, data: DatasetSplits, beam: int, n: int | None,
                    workers: int) -> dict[tuple[int, int], float]:
    scores = {}
    for split in ("test_supervised", "test_zero_shot"):
        for pair, exs in sorted(data.pairs(split).items()):
            res = analysis.evaluate_examples(params, config, exs[:n], data.vocab, beam, workers)
            scores[pair] = res.bleu
    return scores


def cmd_analyze(args) -> int:
    cfg = _load_config(args)
    acfg = cfg.analysis
    beam = args.beam or acfg.beam
    n = acfg.sentences
    workers = _workers()
    if args.significance:
        a, b = (_read_scores(p) for p in args.significance)
        p = metrics.bootstrap_significance(a, b, acfg.bootstrap_iterations, acfg.bootstrap_ratio,
                                           acfg.bootstrap_seed)
        doc = {"p": p, "iterations": acfg.bootstrap_iterations, "ratio": acfg.bootstrap_ratio,
               "seed": acfg.bootstrap_seed, "significant": p < 0.05,
               "meaning": "share of resamples where the second system's mean is at least the "
                          "first's; small p means the second system is better"}
        if args.out:
            atomic_write_text(args.out, json.dumps(doc, indent=2, sort_keys=True) + "\n")
        print(f"p = {p:.4f} ({'significant' if p < 0.05 else 'not significant'} at 0.05)")
        return EXIT_OK

    if not args.checkpoint or not args.data:
        raise InvalidInputError("this analysis needs --checkpoint and --data")
    params, config, _ = load_model(args.checkpoint)
    data = read_dataset(args.data)
    if data.vocab.size != config.vocab_size:
        raise ConfigMismatchError(f"dataset vocabulary has {data.vocab.size} tokens but the "
                                  f"checkpoint expects {config.vocab_size}")
    out = args.out

    if args.case:
        lang_a = _resolve_lang(args.lang_a, data.vocab)
        lang_b = _resolve_lang(args.lang_b, data.vocab)
        case = analysis.ComparisonCase.parse(args.case)
        side = args.side or case.default_side
        depth = config.enc_layers if side == "encoder" else config.dec_layers
        reports = analysis.run_comparison(
            params, config, data, case, lang_a, lang_b, side=side,
            layers=_layers(args.layers, depth), exclude_tag=acfg.exclude_tag, limit=n,
            threshold=acfg.variance_threshold, regularization=acfg.regularization)
        for r in reports:
            print(f"case {case.value} {side} layer {r.layer}: mean {r.mean:.4f} "
                  f"(dims {r.dims_a}/{r.dims_b}, n={r.n})")
        if out:
            analysis.export_plot_data(reports, out)
        return EXIT_OK

    if args.offtarget:
        rows = []
        total_off = total_n = 0
        for (s, t), exs in sorted(data.pairs("test_zero_shot").items()):
            res = analysis.evaluate_examples(params, config, exs[:n], data.vocab, beam, workers)
            names = data.vocab.languages
            rows.append({"pair": f"{names[s].name}-{names[t].name}", "n": len(exs[:n]),
                         "off_target": res.off_target, "bleu": res.bleu})
            total_off += res.off_target * len(exs[:n])
            total_n += len(exs[:n])
        rows.append({"pair": "all", "n": total_n, "off_target": total_off / total_n,
                     "bleu": float("nan")})
        print(f"zero-shot off-target ratio: {total_off / total_n:.4f}")
        if out:
            analysis.export_plot_data(rows, out)
        return EXIT_OK

    if args.svcca:
        per_lang = _pair_svcca(params, config, data, acfg, n)
        names = [lang.name for lang in data.vocab.languages]
        rows = [{"language": names[l], "svcca_vs_central": v} for l, v in per_lang.items()]
        for row in rows:
            print(f"{row['language']}: {row['svcca_vs_central']:.4f}")
        if out:
            analysis.export_plot_data(rows, out)
        return EXIT_OK

    if args.correlate:
        base_params, base_config, _ = load_model(args.correlate)
        mine = _direction_bleu(params, config, data, beam, n, workers)
        theirs = _direction_bleu(base_params, base_config, data, beam, n, workers)
        per_lang = _pair_svcca(params, config, data, acfg, n)
        names = [lang.name for lang in data.vocab.languages]
        key = lambda p: (names[p[0]], names[p[1]])
        delta = {key(p): mine[p] - theirs[p] for p in mine}
        svc = {key(p): per_lang[p[0]] for p in mine}
        report = metrics.correlation_report(delta, svc)
        rows = [{"target": e.group, "n": e.n, "r": e.r, "p": e.p, "skipped": e.skipped}
                for e in report.values()]
        for row in rows:
            print(f"target {row['target']}: r={row['r']:.4f} p={row['p']:.4g} n={row['n']}"
                  + (" (skipped: too few pairs)" if row["skipped"] else ""))
        if out:
            analysis.export_plot_data(rows, out)
        return EXIT_OK

    if args.clusters:
        tags = [lang.tag_token for lang in data.vocab.languages]
        vectors, labels = [], []
        for lang in range(data.vocab.num_languages):
            xs = analysis.aligned_sentences(data, lang)[:n]
            pooled = analysis.collect_pooled(params, config, [(x, tags[lang], x) for x in xs],
                                             "encoder", acfg.exclude_tag)[config.enc_layers]
            vectors.append(pooled.vectors)
            labels += [data.vocab.languages[lang].name] * len(xs)
        stacked = np.concatenate(vectors)
        spread = metrics.cluster_variance(stacked, labels)
        emb = analysis.spectral_coordinates(stacked, 2)
        print(f"cluster variance by language: {spread:.6f}")
        if out:
            rows = [{"index": i, "language": lab, "x0": float(c[0]), "x1": float(c[1])}
                    for i, (lab, c) in enumerate(zip(labels, emb.coordinates))]
            analysis.export_plot_data(rows, out)
        return EXIT_OK

    raise InvalidInputError("choose one of --case, --offtarget, --svcca, --correlate, "
                            "--clusters or --significance")


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ztrans", description="Synthetic multilingual translation lab")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp):
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--preset", choices=("full", "toy"), default="full",
                        help="base values when --config is absent")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field (dotted or bare name); repeatable")

    sp = sub.add_parser("init-config", help="write a config document")
    config_args(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_init_config)

    sp = sub.add_parser("gen-data", help="generate the synthetic corpus")
    config_args(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train a model")
    config_args(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--variant", choices=VARIANTS)
    sp.add_argument("--resume", action="store_true", help="continue from OUT/last.state")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("translate", help="translate a file of token lines")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--tag", required=True, help="target language name or tag token id")
    sp.add_argument("--beam", type=int, default=DEFAULT_BEAM)
    sp.set_defaults(func=cmd_translate)

    sp = sub.add_parser("analyze", help="representation and output analyses")
    config_args(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--data")
    sp.add_argument("--out", help="CSV or JSON export path")
    sp.add_argument("--beam", type=int)
    mode = sp.add_mutually_exclusive_group(required=True)
    mode.add_argument("--case", choices=("i", "ii", "iii", "iv", "v"))
    mode.add_argument("--offtarget", action="store_true")
    mode.add_argument("--svcca", action="store_true")
    mode.add_argument("--correlate", metavar="BASELINE_CHECKPOINT")
    mode.add_argument("--clusters", action="store_true")
    mode.add_argument("--significance", nargs=2, metavar=("SCORES_A", "SCORES_B"))
    sp.add_argument("--lang-a", default="l1")
    sp.add_argument("--lang-b", default="l2")
    sp.add_argument("--side", choices=("encoder", "decoder"))
    sp.add_argument("--layers", default="all")
    sp.set_defaults(func=cmd_analyze)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ConfigMismatchError, InvalidInputError, InvalidTagError) as exc:
        print(f"ztrans {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"ztrans {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ZtransError, ArithmeticError, RuntimeError, ValueError) as exc:
        print(f"ztrans {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
