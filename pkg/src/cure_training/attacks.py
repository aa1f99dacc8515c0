from __future__ import annotations
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .logging_setup import get_logger
from .nn import Network, check_labels, forward, input_gradient_ce
from .types import BoxBounds, PropagationRegion

logger = get_logger("cure_training.attacks")

NORMS = ("linf", "l2")
# offset between restart seeds; per-sample seeds are seed + sample index
_RESTART_STRIDE = 1_000_003

Radius = Union[float, np.ndarray]
IterateHook = Callable[[np.ndarray], None]


@dataclass
class AttackConfig:
    norm: str = "linf"
    eps: float = 0.0
    steps: int = 8
    step_size: float = 0.25      # relative: the step is step_size * eps
    seed: int = 0
    restarts: int = 1
    l2_projection: str = "ball"  # "ball": min(1, eps/||d||) | "sphere": always rescale to eps

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"attack norm must be one of {NORMS}, got {self.norm!r}")
        if self.steps < 0 or self.eps < 0 or self.step_size <= 0 or self.restarts < 1:
            raise ValueError(
                f"invalid attack settings: steps={self.steps} eps={self.eps} "
                f"step_size={self.step_size} restarts={self.restarts}"
            )
        if self.l2_projection not in ("ball", "sphere"):
            raise ValueError(f"l2_projection must be 'ball' or 'sphere', got {self.l2_projection!r}")


def _uniform_start(lower: np.ndarray, upper: np.ndarray, seed: int) -> np.ndarray:
    """Uniform point in [lower, upper]; sample j draws from its own seed + j stream."""
    out = np.empty_like(lower)
    for j in range(lower.shape[0]):
        out[j] = np.random.default_rng(seed + j).uniform(lower[j], upper[j])
    return out


def _flat_norm(v: np.ndarray) -> np.ndarray:
    return np.sqrt((v.reshape(v.shape[0], -1) ** 2).sum(axis=1))


def _per_sample(values: np.ndarray, ndim: int) -> np.ndarray:
    return values.reshape((-1,) + (1,) * (ndim - 1))


def _project_l2(delta: np.ndarray, eps: np.ndarray, mode: str) -> np.ndarray:
    norms = _flat_norm(delta)
    if mode == "sphere":
        scale = np.divide(eps, norms, out=np.ones_like(norms), where=norms > 0)
    else:
        scale = np.divide(eps, norms, out=np.ones_like(norms), where=norms > eps)
    return delta * _per_sample(scale, delta.ndim)


def pgd_linf(
    net: Network,
    x: np.ndarray,
    y,
    eps: float,
    steps: int,
    step_size: float,
    lower: np.ndarray,
    upper: np.ndarray,
    seed: int = 0,
    random_start: bool = True,
    on_iterate: Optional[IterateHook] = None,
) -> np.ndarray:
    """Sign-gradient ascent on cross-entropy, each step clamped to [lower, upper]."""
    xb, single = net.as_batch(x)
    yb = check_labels(y, net.num_classes)
    lower = np.broadcast_to(lower, xb.shape)
    upper = np.broadcast_to(upper, xb.shape)
    cur = _uniform_start(lower, upper, seed) if random_start else xb.copy()
    if on_iterate:
        on_iterate(cur)
    for _ in range(steps):
        _, _, grad = input_gradient_ce(net, cur, yb)
        cur = np.clip(cur + step_size * eps * np.sign(grad), lower, upper)
        if on_iterate:
            on_iterate(cur)
    return cur[0] if single else cur


def pgd_l2(
    net: Network,
    x: np.ndarray,
    y,
    eps: Radius,
    steps: int,
    step_size: float,
    seed: int = 0,
    lower: Optional[np.ndarray] = None,
    upper: Optional[np.ndarray] = None,
    projection: str = "ball",
    random_start: bool = True,
    on_iterate: Optional[IterateHook] = None,
) -> np.ndarray:
    """
    Normalized-gradient ascent inside the l2 ball of radius ``eps`` (scalar or
    one per sample), clamped to [lower, upper] (default clamp(x +/- eps, 0, 1)).
    Samples with a zero gradient keep their iterate.
    """
    xb, single = net.as_batch(x)
    yb = check_labels(y, net.num_classes)
    radius = np.broadcast_to(np.asarray(eps, dtype=np.float64), (xb.shape[0],)).copy()
    if lower is None or upper is None:
        box = BoxBounds.linf_ball(xb, _per_sample(radius, xb.ndim))
        lower, upper = box.lower, box.upper
    lower = np.broadcast_to(lower, xb.shape)
    upper = np.broadcast_to(upper, xb.shape)

    cur = _uniform_start(lower, upper, seed) if random_start else xb.copy()
    cur = np.clip(xb + _project_l2(cur - xb, radius, "ball"), lower, upper)
    if on_iterate:
        on_iterate(cur)
    step = _per_sample(step_size * radius, xb.ndim)
    for _ in range(steps):
        _, _, grad = input_gradient_ce(net, cur, yb)
        g_norm = _flat_norm(grad)
        moving = g_norm > 0
        if moving.any():
            direction = grad / _per_sample(np.where(moving, g_norm, 1.0), xb.ndim)
            delta = _project_l2(cur + step * direction - xb, radius, projection)
            stepped = np.clip(xb + delta, lower, upper)
            cur = np.where(_per_sample(moving, xb.ndim), stepped, cur)
        if on_iterate:
            on_iterate(cur)
    return cur[0] if single else cur


def get_propagation_region(
    net: Network,
    x: np.ndarray,
    y,
    eps: float,
    lam: float,
    steps: int,
    step_size: float,
    norm: str,
    seed: int = 0,
    l2_search: str = "clamped",
    l2_projection: str = "ball",
) -> PropagationRegion:
    """
    Small box of half-width tau = lam/2 * (upper - lower) centered on a PGD
    point, with the center clamped so the box stays in clamp(x +/- eps, 0, 1).

    l2_search="truncated" runs the l2 attack in the ball of radius
    eps - max(tau) instead of the full eps-ball.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"subselection ratio must lie in [0, 1], got {lam}")
    if norm not in NORMS:
        raise ValueError(f"norm must be one of {NORMS}, got {norm!r}")
    xb, _ = net.as_batch(x)
    limits = BoxBounds.linf_ball(xb, eps)
    lower, upper = limits.lower, limits.upper
    tau = lam / 2.0 * (upper - lower)
    if norm == "linf":
        found = pgd_linf(net, xb, y, eps, steps, step_size, lower, upper, seed=seed)
    else:
        radius: Radius = eps
        if l2_search == "truncated":
            radius = np.maximum(eps - tau.reshape(tau.shape[0], -1).max(axis=1), 0.0)
        elif l2_search != "clamped":
            raise ValueError(f"l2_search must be 'clamped' or 'truncated', got {l2_search!r}")
        found = pgd_l2(net, xb, y, radius, steps, step_size, seed=seed,
                       lower=lower, upper=upper, projection=l2_projection)
    center = np.clip(found, lower + tau, upper - tau)
    return PropagationRegion(center=center, radius=tau, lower_limit=lower, upper_limit=upper)


def pgd_robust_mask(net: Network, x: np.ndarray, y, cfg: AttackConfig) -> np.ndarray:
    """
    True where the sample is classified correctly at x and at every PGD iterate
    of every restart. Restart 0 starts from x; with zero steps only x is tested.
    """
    xb, _ = net.as_batch(x)
    yb = check_labels(y, net.num_classes)
    robust = forward(net, xb).argmax(axis=1) == yb
    if cfg.eps == 0:
        return robust

    def _check(points: np.ndarray) -> None:
        nonlocal robust
        robust = robust & (forward(net, points).argmax(axis=1) == yb)

    restarts = cfg.restarts if cfg.steps > 0 else 1
    box = BoxBounds.linf_ball(xb, cfg.eps)
    for r in range(restarts):
        seed = cfg.seed + r * _RESTART_STRIDE
        if cfg.norm == "linf":
            pgd_linf(net, xb, yb, cfg.eps, cfg.steps, cfg.step_size, box.lower, box.upper,
                     seed=seed, random_start=r > 0, on_iterate=_check)
        else:
            pgd_l2(net, xb, yb, cfg.eps, cfg.steps, cfg.step_size, seed=seed,
                   lower=box.lower, upper=box.upper, projection=cfg.l2_projection,
                   random_start=r > 0, on_iterate=_check)
    return robust
