"""Multi-agent debate evaluation, ablations and token accounting.

Agents answer in simultaneous rounds.  Before round ``t > 1`` every agent
records its own previous message and receives its peers' messages through
:func:`protocol.assemble_input`.  Accuracy is measured on the final round,
both as the mean over agents and for the majority answer.
"""
from __future__ import annotations

import csv
import io
import json
import time
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InputError
from .generation import DecodeRequest, DecodeResult, SamplingConfig, decode_batch, extract_answer
from .protocol import (ANSWER_PROMPT, ChannelMode, FormatError, FormatErrorKind, HybridMessage,
                       LatentBlock, TextBlock, append_own, assemble_input, count_comm_tokens,
                       initial_context, message_record, validate_format)
from .stage2 import adapt_latent
from .tasks import Stage1Sample, Stage2Dialogue, evaluate_answer
from .vocab import DELIMITERS


@dataclass
class EvalQuestion:
    contexts: list  # per-agent round-1 question tokens (one entry shared by all)
    question: list  # tokens the answer oracle checks against
    family: str
    labels: list | None = None  # per round, per agent (e, y) when built from a dialogue

    def context_for(self, i):
        return self.contexts[i] if len(self.contexts) > 1 else self.contexts[0]


def as_question(item):
    if isinstance(item, EvalQuestion):
        return item
    if isinstance(item, Stage1Sample):
        return EvalQuestion([list(item.x)], list(item.x), item.family)
    if isinstance(item, Stage2Dialogue):
        ctxs = [list(item.context_for(i)) for i in range(item.num_agents)]
        return EvalQuestion(ctxs, list(item.question or item.x1), item.family,
                            [[(list(e), list(y)) for e, y in row] for row in item.labels])
    raise InputError(f"cannot evaluate {type(item).__name__}")


COMPOSITIONS = {"hybrid": ChannelMode.HYBRID, "text": ChannelMode.TEXT_ONLY,
                "latent_until_final": ChannelMode.LATENT_ONLY_UNTIL_FINAL}


@dataclass
class EvalConfig:
    num_agents: int = 3
    num_rounds: int = 2
    k: int = 6
    composition: str = "hybrid"  # hybrid | text | latent_until_final | mixed
    hybrid_fraction: float = 1.0  # used by "mixed": leading agents are hybrid
    sigma: float = 0.0
    temperature: float = 0.0
    top_k: int | None = None
    top_p: float | None = None
    max_text_len: int = 8
    max_free_text_len: int = 64
    seed: int = 0
    batch_size: int = 64
    include_latents: bool = False  # store latent payloads in transcripts
    capture_attention: bool = False
    # leading rounds whose text is replayed from dialogue labels (latents still rolled out)
    replay_rounds: int = 0

    def __post_init__(self):
        if self.num_agents < 1 or self.num_rounds < 1:
            raise InputError("num_agents and num_rounds must be >= 1")
        if self.composition not in (*COMPOSITIONS, "mixed"):
            raise InputError(f"unknown composition {self.composition!r}")
        if not 0.0 <= self.hybrid_fraction <= 1.0:
            raise InputError("hybrid_fraction must be in [0, 1]")
        if not self.sigma >= 0:
            raise InputError("sigma must be >= 0")
        if not 0 <= self.replay_rounds < self.num_rounds:
            raise InputError("replay_rounds must lie in [0, num_rounds)")

    @property
    def sampling(self):
        return SamplingConfig(self.temperature, self.top_k, self.top_p, self.max_text_len,
                              self.max_free_text_len, self.seed)

    def modes(self):
        if self.composition == "mixed":
            n_h = int(round(self.hybrid_fraction * self.num_agents))
            return [ChannelMode.HYBRID] * n_h + [ChannelMode.TEXT_ONLY] * (self.num_agents - n_h)
        return [COMPOSITIONS[self.composition]] * self.num_agents


@dataclass
class MetricsRecord:
    num_questions: int
    avg_accuracy: float | None
    maj_accuracy: float | None
    tokens_per_question: float | None
    format_error_rate: float | None
    seconds_per_question: float | None = None
    round_avg_accuracy: list = field(default_factory=list)
    round_maj_accuracy: list = field(default_factory=list)
    format_errors: dict = field(default_factory=dict)

    def to_dict(self, include_timing=False):
        d = asdict(self)
        if not include_timing:
            d.pop("seconds_per_question")
        return d


def majority_vote(answers):
    """Most frequent non-missing answer; ties go to the lowest agent index."""
    keyed = [tuple(a) if a is not None else None for a in answers]
    counts = Counter(a for a in keyed if a is not None)
    if not counts:
        return None
    best = max(counts.values())
    for a in keyed:
        if a is not None and counts[a] == best:
            return list(a)


def inject_noise(vectors, sigma, rng):
    """Add i.i.d. N(0, sigma^2) noise to latent vectors (identity at sigma 0)."""
    v = np.asarray(vectors)
    if sigma == 0:
        return v
    return (v + rng.normal(0.0, sigma, v.shape)).astype(v.dtype)


@dataclass
class EvalResult:
    metrics: MetricsRecord
    transcript: list  # JSON-ready per-message records
    traces: list = field(default_factory=list)  # attention traces when captured
    final_latents: list = field(default_factory=list)  # (question, agent, z_k) of the last round


def _noise_rng(seed, q, rnd, sender):
    return np.random.default_rng([seed, 7919, q, rnd, sender])


def run_mad(models, questions, cfg: EvalConfig, adapters=None):
    """Run multi-agent debate on ``questions``; returns an :class:`EvalResult`.

    ``models`` holds one model per agent or a single shared model;
    ``adapters[i]`` maps peer latents into agent ``i``'s width.
    """
    N, T, k = cfg.num_agents, cfg.num_rounds, cfg.k
    models = list(models) if isinstance(models, (list, tuple)) else [models]
    if len(models) == 1:
        models = models * N
    if len(models) != N:
        raise InputError(f"need {N} models, got {len(models)}")
    adapters = adapters or {}
    modes = cfg.modes()
    qs = [as_question(q) for q in questions]
    if cfg.replay_rounds and any(q.labels is None or len(q.labels) < cfg.replay_rounds
                                 or any(len(row) != N for row in q.labels) for q in qs):
        raise InputError("replay_rounds needs dialogue labels for every agent")
    sampling = cfg.sampling
    t0 = time.perf_counter()
    transcript, traces, final_latents = [], [], []
    correct = np.zeros((T, len(qs), N), dtype=bool)
    maj_correct = np.zeros((T, len(qs)), dtype=bool)
    errors = Counter()
    n_msgs = 0
    comm_tokens = 0

    for start in range(0, len(qs), cfg.batch_size):
        chunk = list(range(start, min(start + cfg.batch_size, len(qs))))
        ctxs = {(q, i): initial_context(i, qs[q].context_for(i), models[i].cfg.max_seq_len)
                for q in chunk for i in range(N)}
        prev = {}
        for rnd in range(1, T + 1):
            if rnd > 1:
                for q in chunk:
                    for i in range(N):
                        peers = []
                        for j in range(N):
                            if j == i:
                                continue
                            msg = prev[(q, j)]
                            if msg.latent is not None:
                                vec = inject_noise(msg.latent.vectors, cfg.sigma,
                                                   _noise_rng(cfg.seed, q, rnd - 1, j))
                                if i in adapters:
                                    vec = adapt_latent(adapters[i], vec)
                                msg = HybridMessage(j, msg.round, LatentBlock(vec), msg.text)
                            peers.append(msg)
                        ctx = append_own(ctxs[(q, i)], prev[(q, i)])
                        ctxs[(q, i)] = assemble_input(ctx, peers, modes[i])
            final = rnd == T
            replay = rnd <= cfg.replay_rounds
            requests, keys = {}, {}
            for q in chunk:
                for i in range(N):
                    mode = modes[i]
                    if mode is ChannelMode.TEXT_ONLY:
                        if replay:
                            continue
                        req = DecodeRequest(list(ctxs[(q, i)].items), latent=False, text=True,
                                            rng_key=(q, rnd, i))
                    else:
                        text = (mode is ChannelMode.HYBRID or final) and not replay
                        req = DecodeRequest(list(ctxs[(q, i)].items), k=k, latent=True, text=text,
                                            rng_key=(q, rnd, i))
                    mid = id(models[i])
                    requests.setdefault(mid, []).append(req)
                    keys.setdefault(mid, []).append((q, i))
            results = {(q, i): DecodeResult(None, [], True) for q in chunk for i in range(N)}
            for mid, reqs in requests.items():
                model = next(m for m in models if id(m) == mid)
                for key, res in zip(keys[mid], decode_batch(model, reqs, sampling,
                                                             capture=cfg.capture_attention)):
                    results[key] = res
            for q in chunk:
                answers = []
                for i in range(N):
                    res, mode = results[(q, i)], modes[i]
                    if replay:
                        e, y = qs[q].labels[rnd - 1][i]
                        text = [] if mode is ChannelMode.LATENT_ONLY_UNTIL_FINAL else list(ANSWER_PROMPT) + y
                        if mode is ChannelMode.TEXT_ONLY:
                            text = e + text
                        text = TextBlock(text)
                        parsed = None
                    else:
                        parsed = validate_format(res.items(), i, rnd, mode, answer_prompt=ANSWER_PROMPT)
                        # stray delimiters are already counted as format errors; drop them
                        text = TextBlock(t for t in res.text if t not in DELIMITERS)
                    if mode is ChannelMode.TEXT_ONLY:
                        msg = HybridMessage(i, rnd, None, text)
                    else:
                        msg = HybridMessage(i, rnd, LatentBlock(res.latents), text)
                    ans = extract_answer(text.tokens) if (mode is not ChannelMode.LATENT_ONLY_UNTIL_FINAL
                                                       or final) else None
                    needs_answer = mode is not ChannelMode.LATENT_ONLY_UNTIL_FINAL or final
                    if isinstance(parsed, FormatError):
                        errors[parsed.kind.value] += 1
                    elif needs_answer and not ans:
                        errors[FormatErrorKind.MISSING_ANSWER.value] += 1
                    n_msgs += 1
                    comm_tokens += count_comm_tokens(msg)
                    ok = bool(ans) and evaluate_answer(qs[q].family, qs[q].question, ans)
                    correct[rnd - 1, q, i] = ok
                    answers.append(ans if ans else None)
                    prev[(q, i)] = msg
                    transcript.append(message_record(
                        msg, cfg.include_latents, question=q, mode=mode.value,
                        answer=ans if ans else None, correct=ok))
                    if cfg.capture_attention:
                        traces.append({"question": q, "agent": i, "round": rnd,
                                       "sources": [s.value for s in ctxs[(q, i)].sources],
                                       "k": res.latents.shape[0] if res.latents is not None else 0,
                                       "text_len": len(res.text),
                                       "latent": res.latents is not None,
                                       "attention": res.attention})
                    if final and res.latents is not None and res.latents.shape[0]:
                        final_latents.append((q, i, res.latents[-1].copy()))
                maj = majority_vote(answers)
                maj_correct[rnd - 1, q] = maj is not None and evaluate_answer(
                    qs[q].family, qs[q].question, maj)

    elapsed = time.perf_counter() - t0
    nq = len(qs)
    if nq == 0:
        metrics = MetricsRecord(0, None, None, None, None, None)
    else:
        metrics = MetricsRecord(
            nq, float(correct[-1].mean()), float(maj_correct[-1].mean()),
            comm_tokens / nq, sum(errors.values()) / n_msgs, elapsed / nq,
            [float(correct[t].mean()) for t in range(T)],
            [float(maj_correct[t].mean()) for t in range(T)], dict(sorted(errors.items())))
    return EvalResult(metrics, transcript, traces, final_latents)


def run_interop(models, questions, cfg: EvalConfig, hybrid_fraction, adapters=None):
    """Mixed composition: the leading ``hybrid_fraction`` of agents are hybrid."""
    mixed = EvalConfig(**{**asdict(cfg), "composition": "mixed", "hybrid_fraction": hybrid_fraction})
    return run_mad(models, questions, mixed, adapters)


def tokens_per_question(transcript, num_questions):
    """Total communication units over all logged messages per question."""
    if num_questions == 0:
        return 0.0
    total = 0
    for rec in transcript:
        total += rec["m"] + (rec["k"] + 2 if rec["has_latent_block"] else 0)
    return total / num_questions


# --- output files ---------------------------------------------------------------------------------
CSV_FIELDS = ["config", "composition", "sigma", "num_questions", "avg_accuracy", "maj_accuracy",
              "tokens_per_question", "format_error_rate"]


def metrics_csv(rows):
    """CSV text with one row per (config, composition, sigma)."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for name, composition, sigma, m in rows:
        d = m.to_dict()
        w.writerow({"config": name, "composition": composition, "sigma": sigma,
                    **{f: d[f] for f in CSV_FIELDS[3:]}})
    return buf.getvalue()


def metrics_json(entries):
    """Deterministic JSON for a list of {config, composition, sigma, metrics} dicts."""
    return json.dumps(entries, indent=1, sort_keys=True) + "\n"
