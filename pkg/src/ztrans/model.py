"""Encoder-decoder transformer with target-language tags and the LoLE hook.

Residual blocks are pre-norm.  The encoder input is ``[tag] + source``; the
decoder input is ``[BOS] + target`` and predicts ``target + [EOS]``.  When
LoLE is enabled, a per-language vector of width ``d_e`` is added to the first
``d_e`` features of every position at the input of one encoder layer's
feed-forward sublayer (after the attention residual).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import BOS, EOS, NUM_SPECIALS, PAD, TaggedExample
from .errors import ConfigError, ConfigMismatchError, ContractError, InvalidTagError, ShapeError

NEG_INF = -1e9


@dataclass(frozen=True)
class TransformerConfig:
    vocab_size: int
    num_languages: int
    enc_layers: int = 6
    dec_layers: int = 6
    d_model: int = 512
    heads: int = 4
    d_ffn: int = 1024
    dropout: float = 0.2
    activation: str = "gelu"
    max_positions: int = 256
    tie_embeddings: bool = True
    lole_enabled: bool = False
    lole_layer: int | None = None  # 1-based; None -> second-top encoder layer
    d_e: int = 128
    lclr_enabled: bool = False
    lclr_layer: int | None = None  # 1-based; None -> bottom, or second-bottom with LoLE
    d_h: int = 64
    k: int = 30

    def __post_init__(self):
        if self.lole_layer is None:
            object.__setattr__(self, "lole_layer", max(1, self.enc_layers - 1))
        if self.lclr_layer is None:
            default = 2 if self.lole_enabled else 1
            object.__setattr__(self, "lclr_layer", min(default, self.dec_layers))
        problems = []
        if self.d_model % self.heads:
            problems.append("d_model must be divisible by heads")
        if not 0 < self.d_e <= self.d_model:
            problems.append("d_e must satisfy 0 < d_e <= d_model")
        if not 0 < self.d_h <= self.d_model:
            problems.append("d_h must satisfy 0 < d_h <= d_model")
        if not 1 <= self.lole_layer <= self.enc_layers:
            problems.append("lole_layer must lie in [1, enc_layers]")
        if not 1 <= self.lclr_layer <= self.dec_layers:
            problems.append("lclr_layer must lie in [1, dec_layers]")
        if not 0.0 <= self.dropout < 1.0:
            problems.append("dropout must lie in [0, 1)")
        if self.activation not in ("gelu", "relu"):
            problems.append("activation must be 'gelu' or 'relu'")
        if self.k < 1:
            problems.append("k must be >= 1")
        if problems:
            raise ConfigError("; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TransformerConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    @property
    def first_tag(self) -> int:
        return NUM_SPECIALS

    def tag_index(self, tag: int) -> int:
        idx = int(tag) - NUM_SPECIALS
        if not 0 <= idx < self.num_languages:
            raise InvalidTagError(f"unknown language tag {tag}")
        return idx


class ModelParams(dict):
    """Mapping of parameter name to Tensor."""

    def count(self) -> int:
        return int(np.sum([t.size for t in self.values()]))

    def copy_values(self) -> "ModelParams":
        return ModelParams({k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                            for k, v in self.items()})

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None


def expected_shapes(config: TransformerConfig) -> dict[str, tuple[int, ...]]:
    d, f, v = config.d_model, config.d_ffn, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"embed": (v, d)}
    if not config.tie_embeddings:
        shapes["out_proj"] = (d, v)

    def attn(prefix):
        for n in ("q", "k", "v", "o"):
            shapes[f"{prefix}.w{n}"] = (d, d)
            shapes[f"{prefix}.b{n}"] = (d,)

    def norm(prefix):
        shapes[f"{prefix}.g"] = (d,)
        shapes[f"{prefix}.b"] = (d,)

    def ffn(prefix):
        shapes[f"{prefix}.w1"] = (d, f)
        shapes[f"{prefix}.b1"] = (f,)
        shapes[f"{prefix}.w2"] = (f, d)
        shapes[f"{prefix}.b2"] = (d,)

    for i in range(1, config.enc_layers + 1):
        p = f"enc.{i}"
        norm(f"{p}.ln1"), attn(f"{p}.self"), norm(f"{p}.ln2"), ffn(f"{p}.ffn")
    norm("enc.ln_f")
    for i in range(1, config.dec_layers + 1):
        p = f"dec.{i}"
        norm(f"{p}.ln1"), attn(f"{p}.self"), norm(f"{p}.ln2"), attn(f"{p}.cross")
        norm(f"{p}.ln3"), ffn(f"{p}.ffn")
    norm("dec.ln_f")
    if config.lole_enabled:
        shapes["lole.E"] = (config.num_languages, config.d_e)
    return shapes


def init_params(config: TransformerConfig, seed: int) -> ModelParams:
    """Xavier-uniform weights, N(0, 1/d) embeddings, zero biases, unit gains.

    The LoLE table starts at zero and draws nothing from the generator, so a
    LoLE model and a vanilla model built from the same seed share every other
    parameter bit for bit.
    """
    rng = np.random.default_rng(seed)
    params = ModelParams()
    for name, shape in expected_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "lole.E":
            data = np.zeros(shape)
        elif name == "embed":
            data = rng.normal(0.0, config.d_model ** -0.5, size=shape)
            data[PAD] = 0.0
        elif name.endswith(".g"):
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            assert leaf.startswith("w") or name == "out_proj"
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def check_params(params: ModelParams, config: TransformerConfig) -> None:
    want = expected_shapes(config)
    missing = sorted(set(want) - set(params))
    extra = sorted(set(params) - set(want))
    wrong = [f"{k}: {params[k].shape} != {want[k]}" for k in want
             if k in params and params[k].shape != want[k]]
    if missing or extra or wrong:
        parts = []
        if missing:
            parts.append(f"missing {missing}")
        if extra:
            parts.append(f"unexpected {extra}")
        if wrong:
            parts.append("shape mismatch " + "; ".join(wrong))
        raise ConfigMismatchError("parameters do not match config: " + ", ".join(parts))


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)[:, : d - d // 2]
    return out


_POS_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _positions(config: TransformerConfig) -> np.ndarray:
    key = (config.max_positions, config.d_model)
    if key not in _POS_CACHE:
        _POS_CACHE[key] = sinusoidal_positions(*key)
    return _POS_CACHE[key]


# ------------------------------------------------------------------ traces


@dataclass(frozen=True)
class LayerTrace:
    """Hidden states of one layer for a batch; ``mask`` marks real positions."""

    side: str  # "encoder" | "decoder"
    layer: int  # 1-based; 0 is the embedding output
    capture: str  # "output" | "pre_ffn"
    states: np.ndarray  # (batch, positions, d_model)
    mask: np.ndarray  # (batch, positions) bool
    has_tag: bool = False  # position 0 holds the language tag

    def __post_init__(self):
        self.states.setflags(write=False)
        self.mask.setflags(write=False)

    def example(self, i: int) -> np.ndarray:
        return self.states[i][self.mask[i]]


@dataclass
class ForwardOutput:
    logits: Tensor | None
    enc_out: Tensor
    src_mask: np.ndarray
    tgt_mask: np.ndarray | None = None
    dec_layers: list[Tensor] = field(default_factory=list)
    traces: list[LayerTrace] | None = None

    def trace(self, side: str, layer: int, capture: str = "output") -> LayerTrace:
        for t in self.traces or ():
            if t.side == side and t.layer == layer and t.capture == capture:
                return t
        raise KeyError(f"no {capture} trace for {side} layer {layer}")


# --------------------------------------------------------------- building blocks


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    lead = x.shape[:-1]
    y = ad.matmul(ad.reshape(x, (-1, x.shape[-1])), w) + b
    return ad.reshape(y, lead + (w.shape[1],))


def _norm(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    return ad.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def _attention(params, prefix, config, xq: Tensor, xkv: Tensor, mask: np.ndarray,
               rng) -> Tensor:
    b, tq, d = xq.shape
    tk = xkv.shape[1]
    h = config.heads
    dh = d // h
    q = ad.transpose(ad.reshape(_linear(xq, params[f"{prefix}.wq"], params[f"{prefix}.bq"]),
                                (b, tq, h, dh)), (0, 2, 1, 3))
    k = ad.transpose(ad.reshape(_linear(xkv, params[f"{prefix}.wk"], params[f"{prefix}.bk"]),
                                (b, tk, h, dh)), (0, 2, 3, 1))
    v = ad.transpose(ad.reshape(_linear(xkv, params[f"{prefix}.wv"], params[f"{prefix}.bv"]),
                                (b, tk, h, dh)), (0, 2, 1, 3))
    scores = ad.add(ad.scale(ad.matmul(q, k), 1.0 / math.sqrt(dh)), mask)
    weights = ad.dropout(ad.softmax(scores, axis=-1), config.dropout, rng)
    ctx = ad.reshape(ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)), (b, tq, d))
    return _linear(ctx, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def _ffn(params, prefix, config, x: Tensor, rng) -> Tensor:
    hidden = ad.relu_or_gelu(_linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]),
                             config.activation)
    hidden = ad.dropout(hidden, config.dropout, rng)
    return _linear(hidden, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def _embed(params, config, ids: np.ndarray, rng) -> Tensor:
    if ids.shape[1] > config.max_positions:
        raise ContractError(
            f"sequence length {ids.shape[1]} exceeds max_positions={config.max_positions}")
    x = ad.scale(ad.embedding_lookup(params["embed"], ids), math.sqrt(config.d_model))
    x = ad.add(x, _positions(config)[: ids.shape[1]])
    return ad.dropout(x, config.dropout, rng)


def lole_bias(h: Tensor, e: Tensor) -> Tensor:
    """Add ``e`` to the first ``d_e`` features of every position of ``h``.

    ``h`` is (positions, d) or (batch, positions, d); ``e`` is (d_e,) or
    (batch, d_e) respectively.
    """
    d = h.shape[-1]
    if e.shape[-1] > d:
        raise ShapeError(f"lole_bias: embedding width {e.shape[-1]} exceeds model width {d}")
    if h.ndim == 3 and e.ndim == 2 and e.shape[0] != h.shape[0]:
        raise ShapeError(f"lole_bias: batch mismatch {h.shape} vs {e.shape}")
    padded = ad.pad_head(e, d)
    if h.ndim == 3:
        padded = ad.reshape(padded, (h.shape[0] if e.ndim == 2 else 1, 1, d))
    return ad.add(h, padded)


# ------------------------------------------------------------------ encoder


def pad_batch(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, ids != PAD


def encoder_inputs(config: TransformerConfig, sources: Sequence[Sequence[int]],
                   tags: Sequence[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not sources:
        raise ContractError("encode needs at least one source sentence")
    langs = np.array([config.tag_index(t) for t in tags], dtype=np.int64)
    for s in sources:
        if len(s) == 0:
            raise ContractError("source sentences must be nonempty")
    ids, mask = pad_batch([[int(t)] + list(s) for t, s in zip(tags, sources)])
    return ids, mask, langs


def encode(params: ModelParams, config: TransformerConfig, sources: Sequence[Sequence[int]],
           tags: Sequence[int], trace: bool = False, rng: np.random.Generator | None = None
           ) -> ForwardOutput:
    """Encode ``[tag] + source`` for a batch; ``rng`` enables dropout."""
    ids, mask, langs = encoder_inputs(config, sources, tags)
    key_mask = np.where(mask, 0.0, NEG_INF)[:, None, None, :]
    traces: list[LayerTrace] | None = [] if trace else None
    x = _embed(params, config, ids, rng)
    if trace:
        traces.append(LayerTrace("encoder", 0, "output", x.data.copy(), mask, True))
    for i in range(1, config.enc_layers + 1):
        p = f"enc.{i}"
        xn = _norm(x, params, f"{p}.ln1")
        x = ad.add(x, ad.dropout(_attention(params, f"{p}.self", config, xn, xn, key_mask, rng),
                                 config.dropout, rng))
        if config.lole_enabled and i == config.lole_layer:
            x = lole_bias(x, ad.embedding_lookup(params["lole.E"], langs))
        if trace and i == config.lole_layer:
            traces.append(LayerTrace("encoder", i, "pre_ffn", x.data.copy(), mask, True))
        x = ad.add(x, ad.dropout(_ffn(params, f"{p}.ffn", config, _norm(x, params, f"{p}.ln2"), rng),
                                 config.dropout, rng))
        if trace:
            traces.append(LayerTrace("encoder", i, "output", x.data.copy(), mask, True))
    enc_out = _norm(x, params, "enc.ln_f")
    return ForwardOutput(logits=None, enc_out=enc_out, src_mask=mask, traces=traces)


# ------------------------------------------------------------------ decoder


def decode_states(params: ModelParams, config: TransformerConfig, enc_out: Tensor,
                  src_mask: np.ndarray, tgt_in: np.ndarray, tgt_mask: np.ndarray,
                  trace: bool = False, rng=None
                  ) -> tuple[Tensor, list[Tensor], list[LayerTrace] | None]:
    t = tgt_in.shape[1]
    causal = np.triu(np.full((t, t), NEG_INF), k=1)
    self_mask = causal[None, None] + np.where(tgt_mask, 0.0, NEG_INF)[:, None, None, :]
    cross_mask = np.where(src_mask, 0.0, NEG_INF)[:, None, None, :]
    traces: list[LayerTrace] | None = [] if trace else None
    x = _embed(params, config, tgt_in, rng)
    if trace:
        traces.append(LayerTrace("decoder", 0, "output", x.data.copy(), tgt_mask))
    layers = []
    for i in range(1, config.dec_layers + 1):
        p = f"dec.{i}"
        xn = _norm(x, params, f"{p}.ln1")
        x = ad.add(x, ad.dropout(_attention(params, f"{p}.self", config, xn, xn, self_mask, rng),
                                 config.dropout, rng))
        x = ad.add(x, ad.dropout(_attention(params, f"{p}.cross", config,
                                            _norm(x, params, f"{p}.ln2"), enc_out, cross_mask, rng),
                                 config.dropout, rng))
        x = ad.add(x, ad.dropout(_ffn(params, f"{p}.ffn", config, _norm(x, params, f"{p}.ln3"), rng),
                                 config.dropout, rng))
        layers.append(x)
        if trace:
            traces.append(LayerTrace("decoder", i, "output", x.data.copy(), tgt_mask))
    out = _norm(x, params, "dec.ln_f")
    proj = ad.transpose(params["embed"]) if config.tie_embeddings else params["out_proj"]
    b, tl, d = out.shape
    logits = ad.reshape(ad.matmul(ad.reshape(out, (b * tl, d)), proj), (b, tl, -1))
    return logits, layers, traces


def decoder_io(targets: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``[BOS] + y`` inputs, ``y + [EOS]`` outputs, and the non-pad mask."""
    tgt_in, mask = pad_batch([[BOS] + list(y) for y in targets])
    tgt_out, _ = pad_batch([list(y) + [EOS] for y in targets])
    return tgt_in, tgt_out, mask


def forward_teacher_forced(params: ModelParams, config: TransformerConfig,
                           batch: Sequence[TaggedExample], trace: bool = False,
                           rng: np.random.Generator | None = None
                           ) -> tuple[ForwardOutput, np.ndarray]:
    """Logits (batch, m+1, vocab) for ``[BOS] + y`` inputs; also returns gold outputs."""
    if not batch:
        raise ContractError("forward_teacher_forced needs a nonempty batch")
    enc = encode(params, config, [ex.source for ex in batch], [ex.tag for ex in batch],
                 trace=trace, rng=rng)
    tgt_in, tgt_out, tgt_mask = decoder_io([ex.target for ex in batch])
    logits, layers, dtraces = decode_states(params, config, enc.enc_out, enc.src_mask,
                                            tgt_in, tgt_mask, trace=trace, rng=rng)
    enc.logits = logits
    enc.tgt_mask = tgt_mask
    enc.dec_layers = layers
    if trace:
        enc.traces = enc.traces + dtraces
    return enc, tgt_out
