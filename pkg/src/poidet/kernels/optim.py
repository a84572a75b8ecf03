"""Adam with decoupled weight decay and the one-cycle learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


class Adam:
    """Standard Adam with bias correction; weight decay applied decoupled.

    Parameters are a name -> Tensor mapping; updates iterate names in sorted
    order so that runs are bit-reproducible regardless of dict construction
    order.
    """

    def __init__(self, params: dict[str, Tensor], beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self._v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float, beta1: float = 0.9) -> None:
        self.t += 1
        bc1 = 1.0 - beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise ValueError("non-finite gradient for parameter %r" % name)
            m = self._m[name]
            v = self._v[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= lr * update


@dataclass(frozen=True)
class ScheduleConfig:
    lr_start: float = 3e-4
    lr_max: float = 3e-3
    lr_final: float = 3e-6
    rise_frac: float = 0.4
    beta1_hi: float = 0.95
    beta1_lo: float = 0.85


def lr_schedule(step: int, total_steps: int, cfg: ScheduleConfig = ScheduleConfig()
                ) -> tuple[float, float]:
    """Piecewise-linear one-cycle schedule.

    The learning rate rises lr_start -> lr_max over the first ``rise_frac``
    of training, then decays linearly to lr_final; beta1 mirrors the shape,
    moving beta1_hi -> beta1_lo and back. Returns (lr, beta1).
    """
    if not 0 <= step <= total_steps:
        raise ValueError("step %d outside [0, %d]" % (step, total_steps))
    if total_steps == 0:
        return cfg.lr_start, cfg.beta1_hi
    t = step / total_steps
    if t <= cfg.rise_frac:
        f = t / cfg.rise_frac if cfg.rise_frac > 0 else 1.0
        lr = cfg.lr_start + (cfg.lr_max - cfg.lr_start) * f
        beta1 = cfg.beta1_hi + (cfg.beta1_lo - cfg.beta1_hi) * f
    else:
        f = (t - cfg.rise_frac) / (1.0 - cfg.rise_frac)
        lr = cfg.lr_max + (cfg.lr_final - cfg.lr_max) * f
        beta1 = cfg.beta1_lo + (cfg.beta1_hi - cfg.beta1_lo) * f
    return lr, beta1
