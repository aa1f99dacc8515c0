from __future__ import annotations
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .nn import Network, UpdateDelta

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    m: UpdateDelta
    v: UpdateDelta
    t: int = 0

    @classmethod
    def zeros(cls, net: Network) -> "AdamState":
        return cls(UpdateDelta.zeros(net), UpdateDelta.zeros(net), 0)

    def clone(self) -> "AdamState":
        return AdamState(
            UpdateDelta([a.copy() for a in self.m.layers]),
            UpdateDelta([a.copy() for a in self.v.layers]),
            self.t,
        )


def adam_step(state: AdamState, net: Network, grads: UpdateDelta, lr: float) -> Network:
    """
    One bias-corrected Adam step. ``state`` is updated in place; the returned
    network holds the new parameters.
    """
    grads.check_compatible(net)
    state.t += 1
    c1 = 1.0 - ADAM_BETA1 ** state.t
    c2 = 1.0 - ADAM_BETA2 ** state.t
    new_params = []
    for i, (p, g) in enumerate(zip(net.flat_parameters(), grads.layers)):
        m = ADAM_BETA1 * state.m.layers[i] + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v.layers[i] + (1.0 - ADAM_BETA2) * g * g
        state.m.layers[i] = m
        state.v.layers[i] = v
        new_params.append(p - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS))
    return net.with_flat(new_params)


# =========================
# Schedule
# =========================

# smoothed ramp: polynomial up to SMOOTH_MID of the window, linear afterwards
SMOOTH_MID = 0.25
SMOOTH_POWER = 4.0


@dataclass
class Schedule:
    """
    Per-step epsilon / lambda ramp and per-epoch learning rate.

    Certified step s (0-based, counted from the first epoch after the
    standard-training epoch) has progress min(1, (s + 1) / T) with
    T = anneal_epochs * steps_per_epoch; T = 0 means full values at once.
    """
    eps_inf: float
    eps_2: float
    lambda_inf: float
    lambda_2: float
    lr: float
    lr_decay_epochs: Tuple[int, ...]
    lr_decay_factor: float
    anneal_epochs: int
    steps_per_epoch: int
    shape: str = "linear"
    warmup_tight_coef: float = 0.0
    warmup_relu_coef: float = 0.0

    @classmethod
    def from_config(cls, cfg, steps_per_epoch: int) -> "Schedule":
        return cls(
            eps_inf=cfg.eps_inf, eps_2=cfg.eps_2,
            lambda_inf=cfg.resolved_lambda_inf, lambda_2=cfg.lambda_2,
            lr=cfg.lr, lr_decay_epochs=tuple(cfg.lr_decay_epochs), lr_decay_factor=cfg.lr_decay_factor,
            anneal_epochs=cfg.anneal_epochs, steps_per_epoch=steps_per_epoch, shape=cfg.anneal_shape,
            warmup_tight_coef=cfg.warmup_tight_coef, warmup_relu_coef=cfg.warmup_relu_coef,
        )

    @property
    def anneal_steps(self) -> int:
        return self.anneal_epochs * self.steps_per_epoch

    def progress(self, step: int) -> float:
        if self.anneal_steps == 0:
            return 1.0
        return min(1.0, (step + 1) / self.anneal_steps)

    def ramp(self, step: int) -> float:
        p = self.progress(step)
        if self.shape == "linear" or p >= 1.0:
            return p
        r_mid = SMOOTH_MID / (SMOOTH_POWER * (1.0 - SMOOTH_MID) + SMOOTH_MID)
        if p < SMOOTH_MID:
            return r_mid * (p / SMOOTH_MID) ** SMOOTH_POWER
        return r_mid + (1.0 - r_mid) * (p - SMOOTH_MID) / (1.0 - SMOOTH_MID)

    def eps(self, step: int) -> Tuple[float, float]:
        r = self.ramp(step)
        return self.eps_inf * r, self.eps_2 * r

    def lambdas(self, step: int) -> Tuple[float, float]:
        r = self.ramp(step)
        return self.lambda_inf * r, self.lambda_2 * r

    def is_final(self, step: int) -> bool:
        return self.progress(step) >= 1.0

    def lr_at(self, epoch: int) -> float:
        decays = sum(1 for m in self.lr_decay_epochs if m <= epoch)
        return self.lr * self.lr_decay_factor ** decays

    def warmup_weights(self, step: int) -> Tuple[float, float]:
        """(tightness, relu balance) coefficients, decaying to 0 at anneal end."""
        left = 1.0 - self.progress(step)
        return self.warmup_tight_coef * left, self.warmup_relu_coef * left
