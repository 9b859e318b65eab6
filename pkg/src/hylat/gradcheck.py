"""Finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag


def rel_err(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


@dataclass
class GradReport:
    max_rel_err: float
    num_probed: int
    worst: tuple  # (param name, flat index)
    probes: list = field(default_factory=list)  # (name, flat index, analytic, numeric, rel err)

    def passed(self, tol=1e-4):
        return self.num_probed > 0 and self.max_rel_err < tol


def grad_check(params, loss_fn, num_probes=100, steps=(1e-3, 1e-4, 1e-5), seed=0,
               min_rel_grad=1e-5):
    """Compare analytic gradients of ``loss_fn()`` with central differences.

    ``params`` maps names to float64 parameter tensors and ``loss_fn`` builds
    a scalar loss tensor from their current values.  Probes are spread
    round-robin over the parameter tensors, each at a random entry whose
    gradient is at least ``min_rel_grad`` times the largest one; smaller
    entries sit below what double-precision differences can resolve.

    Each probe uses the five-point central stencil at every step size in
    ``steps`` and keeps the estimate whose neighbour agrees best with it:
    large steps suffer truncation where the loss curves sharply, small ones
    suffer round-off, and the best-agreeing pair sits between the two.
    """
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise TypeError(f"parameter {name} must be float64 for gradient checking")
    _, grads = ag.loss_and_grads(loss_fn(), params)
    rng = np.random.default_rng(seed)
    scale = max((float(np.abs(g).max()) for g in grads.values() if g.size), default=0.0)
    live = {n: np.flatnonzero(np.abs(g) > min_rel_grad * scale) for n, g in grads.items()}
    names = [n for n in params if live[n].size]
    picks = []
    while len(picks) < num_probes and names:
        for n in names:
            if len(picks) >= num_probes:
                break
            picks.append((n, int(rng.choice(live[n]))))

    def value():
        with ag.no_grad():
            return float(loss_fn().data)

    probes = []
    for name, idx in picks:
        flat = params[name].data.reshape(-1)
        orig = flat[idx]
        ests = []
        for eps in steps:
            f = {}
            for s in (-2, -1, 1, 2):
                flat[idx] = orig + s * eps
                f[s] = value()
            ests.append((-f[2] + 8 * f[1] - 8 * f[-1] + f[-2]) / (12 * eps))
        flat[idx] = orig
        if len(ests) > 1:
            j = min(range(len(ests) - 1), key=lambda i: abs(ests[i] - ests[i + 1]))
            num = ests[j + 1]
        else:
            num = ests[0]
        ana = float(grads[name].reshape(-1)[idx])
        probes.append((name, idx, ana, num, rel_err(ana, num)))
    if not probes:
        return GradReport(0.0, 0, ("", -1), [])
    worst = max(probes, key=lambda p: p[4])
    return GradReport(worst[4], len(probes), (worst[0], worst[1]), probes)
