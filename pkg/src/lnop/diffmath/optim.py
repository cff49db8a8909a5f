"""AdamW and the one-cycle learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class OneCycleSchedule:
    max_lr: float = 1e-3
    total_steps: int = 1
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4

    @property
    def initial_lr(self):
        return self.max_lr / self.div_factor

    @property
    def final_lr(self):
        return self.max_lr / self.final_div_factor

    @property
    def peak_step(self):
        return self.pct_start * self.total_steps


def _cos_interp(start, end, frac):
    if frac <= 0.0:
        return start
    if frac >= 1.0:
        return end
    return end + (start - end) * 0.5 * (1.0 + math.cos(math.pi * frac))


def onecycle_lr(schedule, step):
    """Learning rate at ``step`` in ``[0, total_steps]``.

    Cosine warm-up from ``max_lr / div_factor`` to ``max_lr`` at
    ``pct_start * total_steps``, then cosine decay to ``max_lr / final_div_factor``.
    """
    total = schedule.total_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    peak = schedule.peak_step
    if step <= peak:
        frac = step / peak if peak > 0 else 1.0
        return _cos_interp(schedule.initial_lr, schedule.max_lr, frac)
    frac = (step - peak) / (total - peak)
    return _cos_interp(schedule.max_lr, schedule.final_lr, frac)


def adamw_step(params, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-4):
    """One decoupled-weight-decay Adam update, in place on ``params``.

    ``grads`` maps parameter name to gradient array; every parameter needs one
    (pass zeros for an inactive parameter). Names absent from ``grads`` raise.
    """
    for name in params.names():
        if name not in grads:
            raise KeyError(f"no gradient for parameter {name!r}")
    for name in params.names():
        p = params[name]
        g = np.asarray(grads[name], dtype=p.dtype)
        m, v, t = params.state.get(name, (np.zeros_like(p.data), np.zeros_like(p.data), 0))
        t += 1
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        data = p.data * (1.0 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps)
        p.data = data.astype(p.dtype, copy=False)
        params.state[name] = (m.astype(p.dtype, copy=False), v.astype(p.dtype, copy=False), t)
    return params


def clip_grad_norm(grads, max_norm):
    """Scale ``grads`` (dict of arrays) in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * np.asarray(scale, dtype=grads[k].dtype)
    return total
