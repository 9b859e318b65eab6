"""Hybrid-vs-text training losses and the Stage-1 trainer.

Every training example is run through a dialogue engine that handles the
single-turn case (one agent, one round), multi-turn single-agent dialogues
and multi-agent rounds alike.  For each agent and round:

* the *hybrid branch* opens ``<bot>``, rolls out ``k`` latent steps on the
  autodiff graph, closes ``<eot>`` and is scored with cross-entropy on the
  answer prompt, the answer and ``<eos>``;
* the *text branch* continues the same context with the written-out
  elaboration, the answer prompt and the answer, scored on all of it;
* the alignment term pulls the hybrid branch's hidden states at the last
  answer-prompt position toward the text branch's (held fixed), averaged
  over layers.

Later rounds see peer messages rendered with teacher-forced answer text and
the peers' rolled-out latents, so gradients reach earlier rounds' rollouts.
"""
from __future__ import annotations

import contextlib
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import AlignmentError, InputError, ShapeError
from .model import Adam, LatentRef, build_chunk
from .protocol import ANSWER_PROMPT, ROUND_SEPARATOR, SYSTEM_HEADER
from .vocab import BOT, EOS, EOT, agent_marker

PROMPT = list(ANSWER_PROMPT)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # hybrid-branch cross-entropy
    beta: float = 1.0  # text-branch cross-entropy
    gamma: float = 1.0  # hidden-state alignment

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise InputError(f"loss weight {name} must be finite and >= 0")


@dataclass
class LossBreakdown:
    l_hybrid: float
    l_text: float
    l_align: float
    total: float
    align_position_hybrid: list = field(default_factory=list)
    align_position_text: list = field(default_factory=list)
    per_agent: list = field(default_factory=list)  # [{"l_hybrid":..,...}] per agent
    grad_norm: float = float("nan")

    def log_record(self, step, wall_time):
        return {"step": step, "l_hybrid": self.l_hybrid, "l_text": self.l_text,
                "l_align": self.l_align, "total": self.total,
                "align_position_hybrid": self.align_position_hybrid,
                "align_position_text": self.align_position_text,
                "grad_norm": self.grad_norm, "wall_time": wall_time}


def find_align_position(items, answer, prompt=PROMPT):
    """Index of the last answer-prompt token in a sequence ending with the answer.

    ``items`` may end with ``<eos>`` after the answer.  The returned index is
    the position immediately before the first answer token.
    """
    items = list(items)
    answer = list(answer)
    if not answer:
        raise AlignmentError("empty answer")
    end = len(items)
    if end and _tok(items[-1]) == EOS:
        end -= 1
    start = end - len(answer)
    if start < len(prompt) or [_tok(t) for t in items[start:end]] != answer:
        raise AlignmentError("sequence does not end with the answer")
    if [_tok(t) for t in items[start - len(prompt):start]] != list(prompt):
        raise AlignmentError("answer prompt does not directly precede the answer")
    return start - 1


def _tok(item):
    return int(item) if isinstance(item, (int, np.integer)) else None


def align_loss(teacher, student):
    """Mean over layers of the per-row distance sqrt(sum (t - s)^2 + 1e-12).

    ``teacher`` and ``student`` are lists of (rows, d) tensors, one per layer.
    The teacher side is stop-gradient'd here.  Returns a (rows,) tensor.
    """
    if len(teacher) != len(student):
        raise ShapeError(f"layer count mismatch: {len(teacher)} vs {len(student)}")
    if not teacher:
        raise ShapeError("no hidden states to align")
    total = None
    for t, s in zip(teacher, student):
        if t.shape != s.shape:
            raise ShapeError(f"hidden shape mismatch: {t.shape} vs {s.shape}")
        dist = ag.l2_norm(ag.stop_gradient(t) - s)
        total = dist if total is None else total + dist
    return total * (1.0 / len(teacher))


# --- episodes ----------------------------------------------------------------------
@dataclass
class Episode:
    """One training dialogue in engine form.

    ``inputs[t][i]``: new tokens agent ``i`` receives in round ``t`` (round 0
    holds the question); ``labels[t][i] = (e, y)``; ``supervised`` lists the
    rounds contributing to the loss.
    """

    inputs: list
    labels: list
    supervised: tuple

    @property
    def num_agents(self):
        return len(self.inputs[0])

    @property
    def num_rounds(self):
        return len(self.labels)


def episode_from_sample(sample, supervise="all"):
    turns = sample.turn_list()
    T = len(turns)
    sup = tuple(range(T)) if supervise == "all" else (T - 1,)
    if supervise not in ("all", "last"):
        raise InputError("supervise must be 'all' or 'last'")
    return Episode([[list(x)] for x, _, _ in turns], [[(list(e), list(y))] for _, e, y in turns], sup)


def episode_from_dialogue(d):
    N, T = d.num_agents, d.num_turns
    inputs = [[list(d.context_for(i)) for i in range(N)]] + [[[] for _ in range(N)] for _ in range(T - 1)]
    labels = [[(list(e), list(y)) for e, y in row] for row in d.labels]
    return Episode(inputs, labels, (T - 1,))


# --- engine --------------------------------------------------------------------------
@dataclass
class EngineOutput:
    loss: Tensor
    breakdown: LossBreakdown
    latents: dict  # (round, agent) -> (B, k, d) array of rolled-out latents


def _ce_rows(model, hidden_last, targets, span):
    """Per-row mean cross-entropy over marked positions (float64)."""
    R, c, _ = hidden_last.shape
    logits = model.logits(hidden_last).reshape(R * c, model.cfg.vocab_size)
    nll = ag.nll(logits, targets.reshape(-1)).reshape(R, c)
    return (ag.cast(nll, np.float64) * (1.0 / span)[:, None]).sum(axis=1)


def _gather(hidden, cols):
    rows = np.arange(len(cols))
    return [ag.index(h, (rows, cols)) for h in hidden]


def run_episodes(models, episodes, k, weights=LossWeights(), detach_teacher=False,
                 adapters=None, boundary_stop_grad=False, teacher_cache=None):
    """Build the loss graph for a batch of episodes sharing (agents, rounds).

    ``models[i]`` is agent ``i``'s model (the same object may repeat);
    ``adapters[i]`` optionally maps peer latents into agent ``i``'s width.
    With ``detach_teacher`` the text branch is recomputed without recording
    gradients.  With ``boundary_stop_grad`` no gradient crosses a message.
    ``teacher_cache`` (a dict) freezes the alignment targets: the first call
    stores the teacher hidden states and later calls reuse them, which is
    what a finite-difference check of the alignment term needs.
    """
    B = len(episodes)
    if B == 0:
        raise InputError("empty batch")
    N, T = episodes[0].num_agents, episodes[0].num_rounds
    if any(ep.num_agents != N or ep.num_rounds != T for ep in episodes):
        raise InputError("episodes in a batch must share agent and round counts")
    if len(models) != N:
        raise InputError(f"need one model per agent ({N}), got {len(models)}")
    if k < 0:
        raise InputError("k must be >= 0")
    adapters = adapters or {}
    groups = []  # (model, [agents])
    for i, m in enumerate(models):
        for g in groups:
            if g[0] is m:
                g[1].append(i)
                break
        else:
            groups.append((m, [i]))
    where = {}  # agent -> (group index, position in group)
    for gi, (_, agents) in enumerate(groups):
        for p, i in enumerate(agents):
            where[i] = (gi, p)

    states = [m.empty_state(B * len(a)) for m, a in groups]
    prev_lat = [None] * len(groups)  # Zcat tensors from the previous round
    latents_out = {}
    acc = {i: [None, None, None] for i in range(N)}  # per agent (B,) float64 tensors
    n_sup = {i: 0 for i in range(N)}
    pos_h, pos_t = [], []
    sup_rounds = set(episodes[0].supervised)
    if any(set(ep.supervised) != sup_rounds for ep in episodes):
        raise InputError("episodes in a batch must supervise the same rounds")
    last_sup = max(sup_rounds)

    for t in range(T):
        adapted = {}

        def peer_ref(i, j, b, r):
            gj, pj = where[j]
            key = (i, gj)
            if key not in adapted:
                src = prev_lat[gj]
                if boundary_stop_grad:
                    src = ag.stop_gradient(src)
                if i in adapters:
                    src = adapters[i](src)
                elif src.shape[-1] != models[i].cfg.d_model:
                    raise ShapeError(f"agent {j} latents have width {src.shape[-1]}, "
                                     f"agent {i} expects {models[i].cfg.d_model}")
                adapted[key] = src
            Rj = B * len(groups[gj][1])
            return LatentRef(adapted[key], r * Rj + pj * B + b)

        new_lat = [None] * len(groups)
        for gi, (model, agents) in enumerate(groups):
            R = B * len(agents)
            rows, labels = [], []
            for i in agents:
                for b, ep in enumerate(episodes):
                    if t == 0:
                        items = list(SYSTEM_HEADER) + list(ep.inputs[0][i])
                    else:
                        items = list(ROUND_SEPARATOR)
                        for j in range(N):
                            if j == i:
                                continue
                            _, yj = ep.labels[t - 1][j]
                            items.append(agent_marker(j))
                            items += [BOT] + [peer_ref(i, j, b, r) for r in range(k)] + [EOT]
                            items += PROMPT + list(yj)
                        items += list(ep.inputs[t][i])
                    rows.append(items)
                    labels.append(ep.labels[t][i])
            state = states[gi]
            prefix = [r[:-1] for r in rows]
            if any(prefix):
                x, valid = build_chunk(model, prefix)
                _, state, _ = model.extend(state, x, valid)
            base_pos = state.next_pos.copy()
            last = [r[-1] for r in rows]

            # hybrid branch: <bot>, k latent steps, <eot>, prompt, answer
            x, valid = build_chunk(model, [[it, BOT] for it in last])
            hidden, hstate, _ = model.extend(state, x, valid)
            zs = []
            if k:
                z = hidden[-1][:, -1]
                zs.append(z)
                for _ in range(k - 1):
                    hidden, hstate, _ = model.extend(hstate, z.reshape(R, 1, z.shape[-1]),
                                                     np.ones((R, 1), dtype=bool))
                    z = hidden[-1][:, -1]
                    zs.append(z)
                zcat = ag.concat(zs, axis=0)
                new_lat[gi] = zcat
            tails = []
            for r, (_, y) in enumerate(labels):
                lead = [LatentRef(zcat, (k - 1) * R + r)] if k else []
                tails.append(lead + [EOT] + PROMPT + list(y))
            x, valid = build_chunk(model, tails)
            hidden, hstate, _ = model.extend(hstate, x, valid)
            states[gi] = hstate
            if k:
                zd = zcat.data.reshape(k, R, -1)
                for p, i in enumerate(agents):
                    latents_out[(t, i)] = np.transpose(zd[:, p * B:(p + 1) * B], (1, 0, 2)).copy()

            if t not in sup_rounds:
                continue
            c = x.shape[1]
            lead = 1 if k else 0
            tgt = np.full((R, c), -1, dtype=np.int64)
            span = np.zeros(R)
            col_s = np.zeros(R, dtype=np.int64)
            for r, (_, y) in enumerate(labels):
                off = c - len(tails[r])
                seq = tails[r][lead:] + [EOS]
                tgt[r, off + lead: c] = seq[1:]
                span[r] = len(seq) - 1
                col_s[r] = off + lead + len(PROMPT)
            l_h = _ce_rows(model, hidden[-1], tgt, span)
            h_student = _gather(hidden, col_s)
            start = base_pos + 2 + max(k - 1, 0)
            ps = start + (col_s - (c - np.array([len(tl) for tl in tails])))

            # text branch: continue the same context with e, prompt, answer
            need_text = weights.beta > 0 or weights.gamma > 0
            l_t = l_a = None
            if need_text:
                trows = [[it] + list(e) + PROMPT + list(y) for it, (e, y) in zip(last, labels)]
                for tr, (_, y) in zip(trows, labels):
                    find_align_position(tr, y)
                ctx = ag.no_grad() if detach_teacher else contextlib.nullcontext()
                with ctx:
                    xt, vt = build_chunk(model, trows)
                    ht, _, _ = model.extend(state, xt, vt)
                    ct = xt.shape[1]
                    tt = np.full((R, ct), -1, dtype=np.int64)
                    tspan = np.zeros(R)
                    col_t = np.zeros(R, dtype=np.int64)
                    for r, tr in enumerate(trows):
                        off = ct - len(tr)
                        seq = tr + [EOS]
                        tt[r, off:] = seq[1:]
                        tspan[r] = len(seq) - 1
                        col_t[r] = off + len(tr) - len(labels[r][1]) - 1
                    l_t = _ce_rows(model, ht[-1], tt, tspan)
                    h_teacher = _gather(ht, col_t)
                if teacher_cache is not None:
                    key = (t, gi)
                    if key not in teacher_cache:
                        teacher_cache[key] = [h.data.copy() for h in h_teacher]
                    h_teacher = [Tensor(a) for a in teacher_cache[key]]
                pt = base_pos + (col_t - (ct - np.array([len(tr) for tr in trows])))
                l_a = ag.cast(align_loss(h_teacher, h_student), np.float64)
            if t == last_sup:
                pos_h.append(ps.tolist())
                if need_text:
                    pos_t.append(pt.tolist())
            for p, i in enumerate(agents):
                sl = slice(p * B, (p + 1) * B)
                n_sup[i] += 1
                for slot, val in enumerate((l_h, l_t, l_a)):
                    if val is None:
                        continue
                    part = val[sl]
                    acc[i][slot] = part if acc[i][slot] is None else acc[i][slot] + part
        prev_lat = new_lat

    # aggregate: mean over supervised rounds, then episodes, then agents
    w = (weights.alpha, weights.beta, weights.gamma)
    total = None
    per_agent = []
    comp_sums = [0.0, 0.0, 0.0]
    for i in range(N):
        vals = []
        for slot in range(3):
            v = acc[i][slot]
            vals.append(0.0 if v is None else float(v.data.sum()) / (n_sup[i] * B))
            if v is not None and w[slot] > 0:
                term = v.sum() * (w[slot] / (n_sup[i] * B * N))
                total = term if total is None else total + term
        agent_total = sum(wi * vi for wi, vi in zip(w, vals))
        per_agent.append({"l_hybrid": vals[0], "l_text": vals[1], "l_align": vals[2],
                          "total": agent_total})
        for slot in range(3):
            comp_sums[slot] += vals[slot]
    if total is None:
        total = Tensor(np.float64(0.0))
    comps = [s / N for s in comp_sums]
    bd = LossBreakdown(comps[0], comps[1], comps[2], float(total.data),
                       align_position_hybrid=pos_h[0] if pos_h else [],
                       align_position_text=pos_t[0] if pos_t else [],
                       per_agent=per_agent)
    return EngineOutput(total, bd, latents_out)


# --- Stage-1 training -------------------------------------------------------------------
@dataclass
class Stage1Config:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    k: int = 6
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    clip: float = 1.0
    seed: int = 0
    supervise: str = "all"
    log_every: int = 1
    align_warmup: int = 0  # leading steps trained with gamma = 0

    @property
    def weights(self):
        return LossWeights(self.alpha, self.beta, self.gamma)

    def weights_at(self, step):
        if step <= self.align_warmup:
            return LossWeights(self.alpha, self.beta, 0.0)
        return self.weights


def batch_episodes(episodes, batch_size, rng):
    """Draw a batch of episodes that share (agents, rounds) with the first pick."""
    first = episodes[int(rng.integers(len(episodes)))]
    shape = (first.num_agents, first.num_rounds)
    pool = [e for e in episodes if (e.num_agents, e.num_rounds) == shape]
    idx = rng.integers(len(pool), size=batch_size - 1)
    return [first] + [pool[int(i)] for i in idx]


def training_step(models, optimizer, params, episodes, k, weights, **engine_kw):
    """One optimizer step; raises NumericError (no update) on non-finite loss."""
    out = run_episodes(models, episodes, k, weights, **engine_kw)
    _, grads = ag.loss_and_grads(out.loss, params)
    out.breakdown.grad_norm = optimizer.step(grads)
    return out.breakdown


def stage1_step(model, optimizer, samples, k=6, weights=LossWeights(), supervise="all"):
    eps = [episode_from_sample(s, supervise) for s in samples]
    return training_step([model] * eps[0].num_agents, optimizer, model.params, eps, k, weights)


def train_stage1(model, samples, cfg: Stage1Config, log=None, progress=None, start_step=0,
                 opt_state=None):
    """Train ``model`` in place.  ``log`` is an open text file for JSONL records.

    ``start_step`` and ``opt_state`` resume an earlier run: step numbers
    continue from it and the optimizer moments are restored.
    """
    episodes = [episode_from_sample(s, cfg.supervise) for s in samples]
    if not episodes:
        raise InputError("no training samples")
    opt = Adam(model.params, lr=cfg.lr, clip=cfg.clip)
    if opt_state is not None:
        opt.load_state_arrays(opt_state)
    rng = np.random.default_rng([cfg.seed, start_step] if start_step else cfg.seed)
    t0 = time.perf_counter()
    history = []
    for step in range(start_step + 1, start_step + cfg.steps + 1):
        batch = batch_episodes(episodes, cfg.batch_size, rng)
        bd = training_step([model], opt, model.params, batch, cfg.k, cfg.weights_at(step))
        history.append(bd)
        if log is not None and (step % cfg.log_every == 0 or step == start_step + cfg.steps):
            log.write(json.dumps(bd.log_record(step, time.perf_counter() - t0)) + "\n")
        if progress is not None:
            progress(step, bd, opt)
    return history, opt


def config_dict(cfg):
    return asdict(cfg)
