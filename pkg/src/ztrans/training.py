"""Objectives, optimiser and the training loop.

The total objective is token-mean cross-entropy with uniform label smoothing
plus the language-specific contrastive term on pooled decoder states.
Every source of randomness in a step is derived from ``(seed, step)``, so a
run resumed from its last checkpoint replays the uninterrupted run exactly.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import read_checkpoint, save_checkpoint
from .corpus import DatasetSplits, TaggedExample, TemperatureSampler
from .errors import ConfigError, DivergenceError
from .model import ModelParams, TransformerConfig, forward_teacher_forced, init_params

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 5e-4
    warmup_steps: int = 4000
    label_smoothing: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    max_steps: int = 2000
    batch_tokens: int = 8000
    temperature: float = 5.0
    seed: int = 1
    log_every: int = 100
    checkpoint_every: int = 500
    lclr_reduction: str = "sum"  # "sum" over anchors, or "mean"
    valid_batch: int = 256

    def __post_init__(self):
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")
        if self.temperature < 1:
            raise ConfigError("temperature must be >= 1")
        if self.lclr_reduction not in ("sum", "mean"):
            raise ConfigError("lclr_reduction must be 'sum' or 'mean'")
        if self.max_steps < 0 or self.log_every < 1 or self.checkpoint_every < 1:
            raise ConfigError("max_steps >= 0, log_every >= 1, checkpoint_every >= 1 required")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------- objectives


def cross_entropy_loss(logits: Tensor, targets: np.ndarray, smoothing: float = 0.0,
                       mask: np.ndarray | None = None) -> Tensor:
    """Token-mean of -sum_v q(v) log p(v), q = (1 - eps) * onehot + eps / V.

    ``mask`` selects the scored positions; by default every position whose
    target is not the pad id 0.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if mask is None:
        mask = targets != 0
    vocab = logits.shape[-1]
    q = np.full(logits.shape, smoothing / vocab)
    np.put_along_axis(q, targets[..., None], 1.0 - smoothing + smoothing / vocab, axis=-1)
    q *= mask[..., None]
    count = max(int(mask.sum()), 1)
    logp = ad.log_softmax(logits, axis=-1)
    return ad.scale(ad.sum(ad.mul(logp, q)), -1.0 / count)


@dataclass
class LclrBatchView:
    """Pooled decoder heads and the bookkeeping needed to sample pairs."""

    heads: Tensor  # (batch, d_h)
    langs: np.ndarray  # target-language id per example
    uids: np.ndarray  # stable example ids; seed per-anchor sampling
    seed: int


def pooled_heads(states: Tensor, mask: np.ndarray, d_h: int) -> Tensor:
    """Mean over non-pad positions of the first ``d_h`` features."""
    head = ad.slice_head(states, d_h)
    m = mask.astype(np.float64)
    summed = ad.sum(ad.mul(head, m[:, :, None]), axis=1)
    return ad.mul(summed, 1.0 / m.sum(axis=1, keepdims=True))


def lclr_view(states: Tensor, mask: np.ndarray, d_h: int, batch: Sequence[TaggedExample],
              seed: int) -> LclrBatchView:
    return LclrBatchView(
        heads=pooled_heads(states, mask, d_h),
        langs=np.array([ex.tgt_lang for ex in batch], dtype=np.int64),
        uids=np.array([ex.uid for ex in batch], dtype=np.int64),
        seed=seed,
    )


@dataclass
class LclrSample:
    anchors: np.ndarray
    positives: np.ndarray
    negatives: list[np.ndarray]

    @property
    def k_eff(self) -> list[int]:
        return [len(n) for n in self.negatives]


def sample_lclr(langs: np.ndarray, uids: np.ndarray, k: int, seed: int) -> LclrSample:
    """Positive and negative partners for every eligible anchor.

    Examples whose target language occurs once in the batch are dropped.
    Candidates are ordered by uid and each anchor's generator is seeded from
    its own uid, so the draw does not depend on batch order.
    """
    langs = np.asarray(langs)
    uids = np.asarray(uids)
    counts = {lang: int((langs == lang).sum()) for lang in np.unique(langs)}
    eligible = np.array([counts[lang] > 1 for lang in langs], dtype=bool)
    order = np.lexsort((np.arange(len(uids)), uids))
    order = order[eligible[order]]
    by_lang = {lang: order[langs[order] == lang] for lang in np.unique(langs[order])}
    anchors, positives, negatives = [], [], []
    for a in order:
        pos_pool = by_lang[langs[a]]
        pos_pool = pos_pool[pos_pool != a]
        neg_pool = order[langs[order] != langs[a]]
        if len(neg_pool) == 0:
            continue
        rng = np.random.default_rng([seed, int(uids[a])])
        positives.append(pos_pool[int(rng.integers(len(pos_pool)))])
        take = min(k, len(neg_pool))
        negatives.append(neg_pool[rng.choice(len(neg_pool), size=take, replace=False)])
        anchors.append(a)
    return LclrSample(np.asarray(anchors, dtype=np.int64), np.asarray(positives, dtype=np.int64),
                      negatives)


def lclr_terms(heads: Tensor, sample: LclrSample) -> Tensor:
    """Per-anchor -log(e^{s+} / (e^{s+} + sum_i e^{s-_i})) with cosine similarities."""
    z = ad.l2_normalize(heads, axis=-1)
    sim = ad.matmul(z, ad.transpose(z))
    n = len(sample.anchors)
    width = 1 + max(sample.k_eff)
    cols = np.zeros((n, width), dtype=np.int64)
    fill = np.full((n, width), -1e30)
    for r, (p, negs) in enumerate(zip(sample.positives, sample.negatives)):
        cols[r, 0] = p
        cols[r, 1:1 + len(negs)] = negs
        fill[r, : 1 + len(negs)] = 0.0
    picked = ad.add(ad.index(sim, (sample.anchors[:, None], cols)), fill)
    return ad.sub(ad.logsumexp(picked, axis=-1), ad.index(picked, (slice(None), 0)))


def lclr_loss(view: LclrBatchView, k: int, reduction: str = "sum") -> Tensor:
    """Contrastive loss; a constant zero when no anchor has a negative."""
    sample = sample_lclr(view.langs, view.uids, k, view.seed)
    if len(sample.anchors) == 0:
        return Tensor(0.0)
    terms = lclr_terms(view.heads, sample)
    total = ad.sum(terms)
    if reduction == "mean":
        total = ad.scale(total, 1.0 / len(sample.anchors))
    return total


def total_loss(ce: Tensor, ctr: Tensor) -> Tensor:
    return ad.add(ce, ctr)


# ------------------------------------------------------------------ optimiser


def lr_schedule(step: int, base_lr: float, warmup: int) -> float:
    """Linear warmup to ``base_lr`` then inverse square-root decay."""
    if step < 1:
        raise ValueError("step must be >= 1")
    return base_lr * min(step / warmup, math.sqrt(warmup / step))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
              betas: tuple[float, float] = (0.9, 0.98), eps: float = 1e-8
              ) -> tuple[np.ndarray, AdamState]:
    b1, b2 = betas
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, t)


class Adam:
    def __init__(self, params: ModelParams, betas=(0.9, 0.98), eps: float = 1e-8):
        self.params = params
        self.betas = betas
        self.eps = eps
        self.state = {k: AdamState(np.zeros(p.shape), np.zeros(p.shape)) for k, p in params.items()}

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros(p.shape)
            p.data, self.state[name] = adam_step(p.data, g, self.state[name], lr,
                                                 self.betas, self.eps)


# -------------------------------------------------------------------- losses


@dataclass
class StepLosses:
    total: Tensor
    ce: float
    ctr: float
    tokens: int


def _step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


def batch_loss(params: ModelParams, config: TransformerConfig, batch: Sequence[TaggedExample],
               smoothing: float, lclr_seed: int = 0, rng: np.random.Generator | None = None,
               lclr_reduction: str = "sum") -> StepLosses:
    out, gold = forward_teacher_forced(params, config, batch, rng=rng)
    ce = cross_entropy_loss(out.logits, gold, smoothing, mask=out.tgt_mask)
    ctr = Tensor(0.0)
    if config.lclr_enabled:
        view = lclr_view(out.dec_layers[config.lclr_layer - 1], out.tgt_mask, config.d_h,
                         batch, lclr_seed)
        ctr = lclr_loss(view, config.k, lclr_reduction)
    return StepLosses(total_loss(ce, ctr), ce.item(), ctr.item(), int(out.tgt_mask.sum()))


def validation_ce(params: ModelParams, config: TransformerConfig,
                  examples: Sequence[TaggedExample], batch_size: int = 256) -> float:
    """Token-mean NLL (no smoothing, no dropout) over ``examples``."""
    total, tokens = 0.0, 0
    with ad.no_grad():
        for i in range(0, len(examples), batch_size):
            chunk = examples[i:i + batch_size]
            out, gold = forward_teacher_forced(params, config, chunk)
            n = int(out.tgt_mask.sum())
            total += cross_entropy_loss(out.logits, gold, 0.0, mask=out.tgt_mask).item() * n
            tokens += n
    return total / max(tokens, 1)


# ------------------------------------------------------------------ training


@dataclass
class TrainResult:
    params: ModelParams  # best by validation ce
    final_params: ModelParams
    metrics: list[dict] = field(default_factory=list)
    best_step: int = 0
    best_valid_ce: float = math.inf
    initial_valid_ce: float = math.inf


def _append_jsonl(path: Path, record: dict) -> None:
    with open(path, "a", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _save_state(path: Path, params: ModelParams, opt: Adam, config: TransformerConfig,
                meta: dict) -> None:
    tensors = dict(params)
    for name, st in opt.state.items():
        tensors[f"adam.m.{name}"] = Tensor(st.m)
        tensors[f"adam.v.{name}"] = Tensor(st.v)
    save_checkpoint(tensors, path, config, meta)


def train(model_config: TransformerConfig, train_config: TrainConfig, dataset: DatasetSplits,
          out_dir: str | os.PathLike | None = None, resume: bool = False) -> TrainResult:
    """Train from scratch (or resume) and keep the parameters with the lowest valid ce.

    With ``out_dir`` the run writes ``metrics.jsonl`` (one JSON object per
    ``log_every`` steps), ``best.ztrx`` and ``last.state`` for resuming.
    """
    tc = train_config
    out = Path(out_dir) if out_dir is not None else None
    params = init_params(model_config, tc.seed)
    opt = Adam(params, (tc.beta1, tc.beta2), tc.adam_eps)
    sampler = TemperatureSampler(dataset["train"], tc.temperature, tc.batch_tokens, tc.seed)
    valid = dataset["valid"]
    metrics: list[dict] = []
    start = 1
    best = params.copy_values()
    best_step = 0
    initial = validation_ce(params, model_config, valid, tc.valid_batch)
    best_ce = initial

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.jsonl"
        state_path = out / "last.state"
        if resume and state_path.exists():
            saved, header = read_checkpoint(state_path)
            meta = header["meta"]
            for name in params:
                params[name].data = saved[name].data.copy()
                opt.state[name] = AdamState(saved[f"adam.m.{name}"].data.copy(),
                                            saved[f"adam.v.{name}"].data.copy(), meta["step"])
            start = meta["step"] + 1
            best_step, best_ce, initial = meta["best_step"], meta["best_valid_ce"], meta["initial_valid_ce"]
            best_params, _ = read_checkpoint(out / "best.ztrx")
            best = ModelParams({k: Tensor(v.data.copy(), requires_grad=True)
                                for k, v in best_params.items()})
            if metrics_path.exists():
                kept = [ln for ln in metrics_path.read_text(encoding="utf-8").splitlines()
                        if ln and json.loads(ln)["step"] <= meta["step"]]
                metrics = [json.loads(ln) for ln in kept]
                metrics_path.write_text("".join(ln + "\n" for ln in kept), encoding="utf-8")
        elif metrics_path.exists():
            metrics_path.unlink()

    for step in range(start, tc.max_steps + 1):
        batch = sampler.batch(step)
        lr = lr_schedule(step, tc.base_lr, tc.warmup_steps)
        step_seed = _step_seed(tc.seed, step)
        rng = np.random.default_rng(step_seed) if model_config.dropout > 0 else None
        params.zero_grad()
        losses = batch_loss(params, model_config, batch, tc.label_smoothing,
                            lclr_seed=step_seed, rng=rng, lclr_reduction=tc.lclr_reduction)
        if not (math.isfinite(losses.ce) and math.isfinite(losses.ctr)):
            raise DivergenceError(f"non-finite loss at step {step}: ce={losses.ce}, "
                                  f"ctr={losses.ctr}, lr={lr:.3g}")
        losses.total.backward()
        opt.step(lr)

        if step % tc.log_every == 0 or step == tc.max_steps:
            vce = validation_ce(params, model_config, valid, tc.valid_batch)
            if vce < best_ce:
                best_ce, best_step, best = vce, step, params.copy_values()
            if step % tc.log_every == 0:
                record = {"step": step, "lr": lr, "loss_ce": losses.ce,
                          "loss_ctr": losses.ctr, "valid_ce": vce}
                metrics.append(record)
                log.info("step %d lr %.3g ce %.4f ctr %.4f valid %.4f", step, lr,
                         losses.ce, losses.ctr, vce)
                if out is not None:
                    _append_jsonl(metrics_path, record)
        if out is not None and (step % tc.checkpoint_every == 0 or step == tc.max_steps):
            save_checkpoint(best, out / "best.ztrx", model_config,
                            {"step": best_step, "valid_ce": best_ce})
            _save_state(state_path, params, opt, model_config,
                        {"step": step, "best_step": best_step, "best_valid_ce": best_ce,
                         "initial_valid_ce": initial})

    if out is not None and tc.max_steps == 0:
        save_checkpoint(best, out / "best.ztrx", model_config, {"step": 0, "valid_ce": best_ce})
    return TrainResult(params=best, final_params=params, metrics=metrics, best_step=best_step,
                       best_valid_ce=best_ce, initial_valid_ce=initial)
