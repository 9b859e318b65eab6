"""Multi-agent Stage-2 training and the cross-model latent adapter.

Agents run simultaneous rounds; only the final round is supervised and the
per-agent losses are averaged over agents.  Intermediate rounds are
teacher-forced with their labelled answers, while the rolled-out latents stay
on the graph so the final-round loss reaches every earlier rollout.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .errors import InputError, ShapeError
from .model import Adam
from .stage1 import (LossWeights, batch_episodes, episode_from_dialogue, run_episodes,
                     training_step)


class LatentAdapter:
    """Two-layer feed-forward map from a sender's latent width to a receiver's.

    ``src -> src -> dst`` with one GELU in between.  A disabled adapter is the
    identity and requires equal widths.  With ``zero_init_output`` the output
    layer starts at zero, so the initial map is the (zero) output bias.
    """

    def __init__(self, src_width, dst_width, enabled=True, zero_init_output=False, seed=0,
                 name="adapter", dtype=np.float32):
        self.src_width, self.dst_width, self.enabled = src_width, dst_width, enabled
        self.name = name
        self.params = {}
        if not enabled:
            if src_width != dst_width:
                raise ShapeError(f"disabled adapter needs equal widths, got {src_width} -> {dst_width}")
            return
        rng = np.random.default_rng(seed)
        w1 = rng.normal(0.0, 1.0 / np.sqrt(src_width), (src_width, src_width))
        w2 = (np.zeros((src_width, dst_width)) if zero_init_output
              else rng.normal(0.0, 1.0 / np.sqrt(src_width), (src_width, dst_width)))
        for key, arr in (("w1", w1), ("b1", np.zeros(src_width)),
                         ("w2", w2), ("b2", np.zeros(dst_width))):
            self.params[f"{name}.{key}"] = ag.parameter(arr.astype(dtype), name=f"{name}.{key}")

    def __call__(self, z):
        """Map a (rows, src) tensor to (rows, dst)."""
        if z.shape[-1] != self.src_width:
            raise ShapeError(f"adapter expects width {self.src_width}, got {z.shape[-1]}")
        if not self.enabled:
            return z
        p = self.params
        h = ag.gelu(ag.linear(z, p[f"{self.name}.w1"], p[f"{self.name}.b1"]))
        return ag.linear(h, p[f"{self.name}.w2"], p[f"{self.name}.b2"])

    def state_arrays(self):
        return {k: v.data for k, v in self.params.items()}

    def load_state_arrays(self, arrays):
        for k in self.params:
            self.params[k].data = arrays[k].astype(self.params[k].dtype)


def adapt_latent(adapter, vectors):
    """Apply ``adapter`` to a (k, d) array outside of training."""
    v = np.asarray(vectors)
    if adapter is None:
        return v
    with ag.no_grad():
        out = adapter(ag.Tensor(v.astype(np.float32)))
    return out.data


@dataclass
class Stage2Config:
    steps: int = 500
    batch_size: int = 8
    lr: float = 1e-3
    k: int = 6
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    clip: float = 1.0
    seed: int = 0
    boundary_stop_grad: bool = False
    log_every: int = 1

    @property
    def weights(self):
        return LossWeights(self.alpha, self.beta, self.gamma)


def stage2_losses(models, dialogues, k=6, weights=LossWeights(), adapters=None,
                  boundary_stop_grad=False, detach_teacher=False):
    """Loss graph and breakdown for a batch of dialogues (see ``run_episodes``)."""
    eps = [episode_from_dialogue(d) for d in dialogues]
    if len(models) == 1 and eps[0].num_agents > 1:
        models = list(models) * eps[0].num_agents
    return run_episodes(models, eps, k, weights, detach_teacher=detach_teacher,
                        adapters=adapters, boundary_stop_grad=boundary_stop_grad)


def collect_params(models, adapters=None):
    """Union of trainable parameters, uniquely named per distinct model."""
    params, seen = {}, []
    for i, m in enumerate(models):
        if any(m is s for s in seen):
            continue
        prefix = "" if not seen else f"agent{i}/"
        seen.append(m)
        for k, v in m.params.items():
            params[prefix + k] = v
    for a in (adapters or {}).values():
        params.update(a.params)
    return params


def stage2_step(models, optimizer, params, dialogues, k=6, weights=LossWeights(),
                adapters=None, boundary_stop_grad=False):
    eps = [episode_from_dialogue(d) for d in dialogues]
    if len(models) == 1:
        models = list(models) * eps[0].num_agents
    return training_step(models, optimizer, params, eps, k, weights, adapters=adapters,
                         boundary_stop_grad=boundary_stop_grad)


def train_stage2(models, dialogues, cfg: Stage2Config, adapters=None, log=None, progress=None,
                 start_step=0, opt_state=None):
    """Train agent models (and adapters) in place on multi-agent dialogues.

    ``models`` holds one model per agent, or a single shared model.
    ``start_step`` and ``opt_state`` resume an earlier run.
    """
    episodes = [episode_from_dialogue(d) for d in dialogues]
    if not episodes:
        raise InputError("no training dialogues")
    N = max(e.num_agents for e in episodes)
    if len(models) == 1:
        models = list(models) * N
    params = collect_params(models, adapters)
    opt = Adam(params, lr=cfg.lr, clip=cfg.clip)
    if opt_state is not None:
        opt.load_state_arrays(opt_state)
    rng = np.random.default_rng([cfg.seed, start_step] if start_step else cfg.seed)
    t0 = time.perf_counter()
    history = []
    for step in range(start_step + 1, start_step + cfg.steps + 1):
        batch = batch_episodes(episodes, cfg.batch_size, rng)
        n = batch[0].num_agents
        bd = training_step(models[:n], opt, params, batch, cfg.k, cfg.weights,
                           adapters=adapters, boundary_stop_grad=cfg.boundary_stop_grad)
        history.append(bd)
        if log is not None and (step % cfg.log_every == 0 or step == start_step + cfg.steps):
            log.write(json.dumps(bd.log_record(step, time.perf_counter() - t0)) + "\n")
        if progress is not None:
            progress(step, bd, opt)
    return history, opt
