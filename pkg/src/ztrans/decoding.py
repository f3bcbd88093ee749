"""Greedy and beam-search decoding.

The decoder prefix is re-run at every step (no key/value cache); at desk
scale this costs less than the bookkeeping a cache would need.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import BOS, EOS, PAD
from .model import ModelParams, TransformerConfig, decode_states, encode

DEFAULT_BEAM = 4


def default_max_len(config: TransformerConfig, source_len: int) -> int:
    return min(2 * source_len + 10, config.max_positions - 1)


def _step_logprobs(params, config, enc_out: Tensor, src_mask, prefixes: np.ndarray,
                   force_eos) -> np.ndarray:
    """Next-token log-probabilities; rows selected by ``force_eos`` may only end."""
    tgt_mask = prefixes != PAD
    logits, _, _ = decode_states(params, config, enc_out, src_mask, prefixes, tgt_mask)
    last = logits.data[:, -1, :]
    last = last - last.max(axis=-1, keepdims=True)
    lp = last - np.log(np.exp(last).sum(axis=-1, keepdims=True))
    lp[:, PAD] = -np.inf
    lp[:, BOS] = -np.inf
    rows = np.broadcast_to(np.asarray(force_eos, dtype=bool), (lp.shape[0],))
    if rows.any():
        keep = lp[rows, EOS]
        lp[rows] = -np.inf
        lp[rows, EOS] = keep
    return lp


def greedy_decode(params: ModelParams, config: TransformerConfig,
                  sources: Sequence[Sequence[int]], tags: Sequence[int],
                  max_len: int | None = None) -> list[list[int]]:
    """Batched argmax decoding; returns token lists without BOS/EOS.

    Each sentence keeps its own length limit, so results do not depend on
    what else is in the batch.
    """
    with ad.no_grad():
        enc = encode(params, config, sources, tags)
        n = len(sources)
        limits = np.array([max_len or default_max_len(config, len(s)) for s in sources])
        prefixes = np.full((n, 1), BOS, dtype=np.int64)
        done = np.zeros(n, dtype=bool)
        out: list[list[int]] = [[] for _ in range(n)]
        for step in range(int(limits.max())):
            lp = _step_logprobs(params, config, enc.enc_out, enc.src_mask, prefixes,
                                force_eos=step == limits - 1)
            nxt = lp.argmax(axis=-1)
            nxt[done] = PAD
            for i in np.flatnonzero(~done):
                if nxt[i] == EOS:
                    done[i] = True
                else:
                    out[i].append(int(nxt[i]))
            if done.all():
                break
            prefixes = np.concatenate([prefixes, nxt[:, None]], axis=1)
        return out


def beam_search(params: ModelParams, config: TransformerConfig, source: Sequence[int],
                tag: int, beam_size: int = DEFAULT_BEAM, max_len: int | None = None,
                length_penalty: float = 1.0) -> list[int]:
    """Best finished hypothesis under log-probability / length ** length_penalty.

    An EOS candidate only finalises a hypothesis when it ranks inside the top
    ``beam_size`` expansions, which makes ``beam_size=1`` identical to greedy.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    limit = max_len or default_max_len(config, len(source))
    with ad.no_grad():
        enc = encode(params, config, [source], [tag])
        active: list[tuple[list[int], float]] = [([], 0.0)]
        finished: list[tuple[float, int, list[int]]] = []
        for step in range(limit):
            n = len(active)
            prefixes = np.array([[BOS] + toks for toks, _ in active], dtype=np.int64)
            enc_out = Tensor(np.repeat(enc.enc_out.data, n, axis=0))
            src_mask = np.repeat(enc.src_mask, n, axis=0)
            lp = _step_logprobs(params, config, enc_out, src_mask, prefixes,
                                force_eos=step == limit - 1)
            scores = np.array([s for _, s in active])[:, None] + lp
            flat = scores.ravel()
            order = np.argsort(-flat, kind="stable")[: 2 * beam_size]
            nxt_active = []
            vocab = lp.shape[1]
            for rank, idx in enumerate(order):
                score = flat[idx]
                if not np.isfinite(score):
                    break
                row, tok = divmod(int(idx), vocab)
                toks = active[row][0]
                if tok == EOS:
                    if rank < beam_size:
                        norm = score / (len(toks) + 1) ** length_penalty
                        finished.append((norm, len(finished), toks))
                elif len(nxt_active) < beam_size:
                    nxt_active.append((toks + [tok], float(score)))
            if len(finished) >= beam_size or not nxt_active:
                break
            active = nxt_active
        best = max(finished, key=lambda f: (f[0], -f[1]))
        return list(best[2])


def translate(params: ModelParams, config: TransformerConfig, sources: Sequence[Sequence[int]],
              tags: Sequence[int], beam_size: int = DEFAULT_BEAM,
              length_penalty: float = 1.0) -> list[list[int]]:
    """Decode every source; ``beam_size == 1`` takes the batched greedy path."""
    if not sources:
        return []
    if beam_size == 1:
        return greedy_decode(params, config, sources, tags)
    return [beam_search(params, config, s, t, beam_size, length_penalty=length_penalty)
            for s, t in zip(sources, tags)]
