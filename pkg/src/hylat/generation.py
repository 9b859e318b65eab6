"""Sampling and batched hybrid / text-only decoding.

A hybrid message is produced by opening ``<bot>``, rolling out ``k`` latent
steps (each final-layer hidden state is fed straight back as the next input),
closing with ``<eot>``, forcing the answer prompt, then decoding tokens until
``<eos>`` or the length limit.  Text-only messages decode free text from the
context.  All decoding runs without recording gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import CapacityError, InputError, NumericError
from .model import build_chunk, fork
from .protocol import (ANSWER_PROMPT, AgentContext, ChannelMode, HybridMessage, LatentBlock,
                       TextBlock)
from .vocab import BOT, EOS, EOT


@dataclass(frozen=True)
class SamplingConfig:
    temperature: float = 0.0
    top_k: int | None = None
    top_p: float | None = None
    max_text_len: int = 8  # tokens decoded after the forced answer prompt
    max_free_text_len: int = 64  # tokens decoded by text-only agents
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise InputError("temperature must be >= 0")
        if self.top_k is not None and self.top_k < 1:
            raise InputError("top_k must be >= 1")
        if self.top_p is not None and not 0.0 < self.top_p <= 1.0:
            raise InputError("top_p must be in (0, 1]")
        if self.max_text_len < 1 or self.max_free_text_len < 1:
            raise InputError("decode length limits must be positive")

    @property
    def greedy(self):
        return self.temperature == 0.0


def sampling_distribution(logits, cfg: SamplingConfig):
    """Next-token distribution after temperature, top-k then top-p filtering.

    Filtered-out entries are exactly zero and the rest renormalised.  If every
    entry is masked (e.g. all logits are -inf) the argmax gets all the mass.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if np.isnan(logits).any():
        raise NumericError("NaN in logits")
    one_hot = np.zeros_like(logits)
    one_hot[int(np.argmax(logits))] = 1.0
    if cfg.greedy or not np.isfinite(logits).any():
        return one_hot
    z = logits / cfg.temperature
    keep = np.isfinite(z)
    if cfg.top_k is not None and cfg.top_k < keep.sum():
        kth = np.sort(np.where(keep, z, -np.inf))[-cfg.top_k]
        keep &= z >= kth
        # ties at the threshold: keep the lowest ids so exactly top_k survive
        extra = np.nonzero(keep)[0]
        if len(extra) > cfg.top_k:
            order = extra[np.argsort(-z[extra], kind="stable")]
            keep[:] = False
            keep[order[: cfg.top_k]] = True
    p = np.zeros_like(z)
    zz = z[keep]
    e = np.exp(zz - zz.max())
    p[keep] = e / e.sum()
    if cfg.top_p is not None and cfg.top_p < 1.0:
        order = np.argsort(-p, kind="stable")
        cum = np.cumsum(p[order])
        n = int(np.searchsorted(cum, cfg.top_p - 1e-12) + 1)
        mask = np.zeros_like(keep)
        mask[order[:n]] = True
        p = np.where(mask, p, 0.0)
    s = p.sum()
    if not s > 0:
        return one_hot
    return p / s


def apply_sampling(logits, cfg: SamplingConfig, rng=None):
    """Pick a token id from ``logits``; greedy when temperature is 0."""
    p = sampling_distribution(logits, cfg)
    if cfg.greedy:
        return int(np.argmax(p))
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    return int(rng.choice(len(p), p=p))


def extract_answer(text_tokens, prompt=ANSWER_PROMPT):
    """Tokens following the last answer prompt, or None if it is absent."""
    toks = list(text_tokens)
    n = len(prompt)
    for i in range(len(toks) - n, -1, -1):
        if tuple(toks[i:i + n]) == tuple(prompt):
            return toks[i + n:]
    return None


@dataclass
class DecodeRequest:
    items: list  # context items (token ids and latent vectors)
    k: int = 6
    latent: bool = True  # emit a <bot> z.. <eot> block
    text: bool = True  # decode text (after the answer prompt when latent)
    rng_key: tuple = ()  # extra entropy for non-greedy sampling


@dataclass
class DecodeResult:
    latents: np.ndarray | None  # (k, d) or None
    text: list  # prompt + decoded tokens (hybrid) or free text, without <eos>
    stopped: bool  # decoding ended with <eos>
    attention: list = field(default_factory=list)  # per generated item, final-layer head-mean row

    def items(self):
        if self.latents is None:
            return list(self.text)
        return [BOT] + list(self.latents) + [EOT] + list(self.text)


def _rows(attn, state, col=-1):
    if attn is None:
        return None
    a = attn[:, :, col, :].mean(axis=1)
    return [a[b][state.valid[b]].astype(np.float64) for b in range(a.shape[0])]


def _decode_tokens(model, state, logits, n_max, sampling, rngs, capture, attn_rows, records):
    """Greedy/sampled token loop shared by both decoders (batched rows)."""
    B = logits.shape[0]
    out = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    rows = attn_rows
    for _ in range(n_max):
        nxt = []
        for b in range(B):
            tok = apply_sampling(logits[b], sampling, rngs[b]) if not done[b] else EOS
            if not done[b]:
                if capture:
                    records[b].append(rows[b])
                if tok == EOS:
                    done[b] = True
                else:
                    out[b].append(tok)
            nxt.append(tok)
        if done.all():
            break
        x, valid = build_chunk(model, [[t] for t in nxt])
        hidden, state, attn = model.extend(state, x, valid, capture=capture)
        logits = model.logits(hidden[-1]).data[:, -1]
        rows = _rows(attn, state) if capture else None
    return out, done


def decode_batch(model, requests, sampling: SamplingConfig, capture=False):
    """Decode a list of :class:`DecodeRequest`; returns :class:`DecodeResult` s."""
    results = [None] * len(requests)
    groups = {}
    for i, r in enumerate(requests):
        if not r.latent and not r.text:
            raise InputError("a request must ask for a latent block, text, or both")
        groups.setdefault((r.latent, r.k if r.latent else 0), []).append(i)
    with ag.no_grad():
        for (latent, k), idx in sorted(groups.items()):
            reqs = [requests[i] for i in idx]
            rngs = [np.random.default_rng([sampling.seed, *r.rng_key]) for r in reqs]
            fn = _decode_hybrid if latent else _decode_text
            for i, res in zip(idx, fn(model, reqs, k, sampling, rngs, capture)):
                results[i] = res
    return results


def _check_capacity(model, n):
    if n > model.cfg.max_seq_len:
        raise CapacityError(f"decoding needs {n} positions, max_seq_len is {model.cfg.max_seq_len}")


def _decode_hybrid(model, reqs, k, sampling, rngs, capture):
    B = len(reqs)
    for r in reqs:
        need = len(r.items) + 2 + k
        if r.text:
            need += len(ANSWER_PROMPT) + sampling.max_text_len
        _check_capacity(model, need)
    records = [[] for _ in range(B)]
    x, valid = build_chunk(model, [list(r.items) + [BOT] for r in reqs])
    hidden, state, attn = model.extend(model.empty_state(B), x, valid, capture=capture)
    zs = []
    if k:
        z = hidden[-1].data[:, -1]
        if capture:
            for b, row in enumerate(_rows(attn, state)):
                records[b].append(row)
        zs.append(z)
        for _ in range(k - 1):
            hidden, state, attn = model.extend(state, Tensor(z[:, None, :]), np.ones((B, 1), bool),
                                               capture=capture)
            z = hidden[-1].data[:, -1]
            zs.append(z)
            if capture:
                for b, row in enumerate(_rows(attn, state)):
                    records[b].append(row)
    lat = np.stack(zs, axis=1) if zs else np.zeros((B, 0, model.cfg.d_model), model.dtype)
    if not np.all(np.isfinite(lat)):
        raise NumericError("non-finite latent vector during rollout")

    texts = [[] for _ in range(B)]
    stopped = [False] * B
    tb = [b for b, r in enumerate(reqs) if r.text]
    if tb:
        st = state if len(tb) == B else fork(state, tb)
        tails = [([lat[b, -1]] if k else []) + [EOT] + list(ANSWER_PROMPT) for b in tb]
        x, valid = build_chunk(model, tails)
        hidden, st, attn = model.extend(st, x, valid, capture=capture)
        logits = model.logits(hidden[-1]).data[:, -1]
        rows = _rows(attn, st) if capture else None
        sub_records = [records[b] for b in tb]
        out, done = _decode_tokens(model, st, logits, sampling.max_text_len, sampling,
                                   [rngs[b] for b in tb], capture, rows, sub_records)
        for j, b in enumerate(tb):
            texts[b] = list(ANSWER_PROMPT) + out[j]
            stopped[b] = bool(done[j])
    return [DecodeResult(lat[b].copy(), texts[b], stopped[b], records[b]) for b in range(B)]


def _decode_text(model, reqs, k, sampling, rngs, capture):
    B = len(reqs)
    for r in reqs:
        if not r.items:
            raise InputError("text decoding needs a nonempty context")
        _check_capacity(model, len(r.items) + sampling.max_free_text_len)
    records = [[] for _ in range(B)]
    x, valid = build_chunk(model, [list(r.items) for r in reqs])
    hidden, state, attn = model.extend(model.empty_state(B), x, valid, capture=capture)
    logits = model.logits(hidden[-1]).data[:, -1]
    rows = _rows(attn, state) if capture else None
    out, done = _decode_tokens(model, state, logits, sampling.max_free_text_len, sampling,
                               rngs, capture, rows, records)
    return [DecodeResult(None, out[b], bool(done[b]), records[b]) for b in range(B)]


# --- single-context convenience API ----------------------------------------------------------
def hybrid_decode(model, ctx: AgentContext, k, sampling: SamplingConfig, round=1,
                  mode=ChannelMode.HYBRID, final_round=True, capture=False):
    """Generate one agent's message for ``ctx``.

    Latent-only-until-final agents emit an empty text block before the last
    round.  Returns ``(message, result)``.
    """
    if mode is ChannelMode.TEXT_ONLY:
        req = DecodeRequest(list(ctx.items), latent=False, text=True)
    else:
        text = mode is ChannelMode.HYBRID or final_round
        req = DecodeRequest(list(ctx.items), k=k, latent=True, text=text)
    (res,) = decode_batch(model, [req], sampling, capture=capture)
    latent = LatentBlock(res.latents) if res.latents is not None else None
    return HybridMessage(ctx.agent_id, round, latent, TextBlock(res.text)), res


def text_decode(model, ctx: AgentContext, sampling: SamplingConfig, round=1, capture=False):
    return hybrid_decode(model, ctx, 0, sampling, round, ChannelMode.TEXT_ONLY, capture=capture)
