"""
Certified-training losses.

Every loss returns a :class:`LossResult` holding the batch value and the exact
parameter gradient. Propagation regions are treated as constants with respect
to the parameters; with zero attack steps every loss is a smooth function of
the parameters away from ReLU kinks.
"""
from __future__ import annotations
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.special import log_softmax

from .attacks import get_propagation_region
from .errors import ConfigRangeError
from .ibp import BoxTape, Pullback, ibp_loss_terms, l2_logit_diff_upper, logit_diff_upper, logit_diff_upper_vjp
from .logging_setup import get_logger
from .nn import Network, UpdateDelta, check_labels
from .types import BoundDiffDistribution, BoxBounds, CertifiedSubset, LogitDiffBounds

logger = get_logger("cure_training.losses")

# l2 branch draws its PGD starts from seed + this offset
L2_SEED_OFFSET = 7_919


@dataclass
class LossConfig:
    eps_inf: float = 0.3
    eps_2: float = 1.0
    lambda_inf: float = 0.6
    lambda_2: float = 1e-5
    alpha: float = 0.5
    eta: float = 2.0
    q_norm: str = "linf"
    l1_weight: float = 1e-6
    elide_last: bool = True
    attack_steps: int = 8
    attack_step_size: float = 0.25
    l2_search: str = "clamped"
    l2_projection: str = "ball"
    subset_source: str = "small_box"   # or "full_eps"
    seed: int = 0

    def __post_init__(self):
        for name in ("alpha", "lambda_inf", "lambda_2"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigRangeError(f"{name} must lie in [0, 1], got {value}")
        for name in ("eta", "l1_weight", "eps_inf", "eps_2"):
            if getattr(self, name) < 0:
                raise ConfigRangeError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.q_norm not in ("linf", "l2"):
            raise ConfigRangeError(f"q_norm must be 'linf' or 'l2', got {self.q_norm!r}")
        if self.subset_source not in ("small_box", "full_eps"):
            raise ConfigRangeError(f"subset_source must be 'small_box' or 'full_eps', got {self.subset_source!r}")

    def eps(self, norm: str) -> float:
        return self.eps_inf if norm == "linf" else self.eps_2

    def lam(self, norm: str) -> float:
        return self.lambda_inf if norm == "linf" else self.lambda_2

    def seed_for(self, norm: str) -> int:
        return self.seed if norm == "linf" else self.seed + L2_SEED_OFFSET


@dataclass
class LossResult:
    value: float
    grads: UpdateDelta
    per_sample: np.ndarray
    components: Dict[str, float] = field(default_factory=dict)
    n_c: int = 0


@dataclass
class _Branch:
    """Small-box bounds of one norm for a batch, plus their pullback."""
    bounds: LogitDiffBounds
    pullback: Pullback
    losses: np.ndarray
    grad_u: np.ndarray


def _branch(net: Network, x: np.ndarray, y: np.ndarray, cfg: LossConfig, norm: str) -> _Branch:
    region = get_propagation_region(
        net, x, y, cfg.eps(norm), cfg.lam(norm), cfg.attack_steps, cfg.attack_step_size, norm,
        seed=cfg.seed_for(norm), l2_search=cfg.l2_search, l2_projection=cfg.l2_projection,
    )
    bounds, pullback = logit_diff_upper_vjp(net, region.box(), y, elide_last=cfg.elide_last)
    losses, grad_u = ibp_loss_terms(bounds)
    return _Branch(bounds, pullback, losses, grad_u)


def _prepare(net: Network, x: np.ndarray, y) -> Tuple[np.ndarray, np.ndarray]:
    xb, _ = net.as_batch(x)
    return xb, check_labels(y, net.num_classes)


def _single_norm(net: Network, x, y, cfg: LossConfig, norm: str) -> LossResult:
    xb, yb = _prepare(net, x, y)
    br = _branch(net, xb, yb, cfg, norm)
    value = float(br.losses.mean())
    grads = br.pullback(br.grad_u * (1.0 / xb.shape[0]))
    return LossResult(value, grads, br.losses, {norm: value})


def sabr_linf_loss(net: Network, x, y, cfg: LossConfig) -> LossResult:
    """IBP loss of the small box around an l-inf adversarial point."""
    return _single_norm(net, x, y, cfg, "linf")


def l2_loss(net: Network, x, y, cfg: LossConfig) -> LossResult:
    """IBP loss of the small box around an l2 adversarial point."""
    return _single_norm(net, x, y, cfg, "l2")


def joint_loss(net: Network, x, y, cfg: LossConfig) -> LossResult:
    """(1 - alpha) * l-inf loss + alpha * l2 loss."""
    xb, yb = _prepare(net, x, y)
    a = cfg.alpha
    b = xb.shape[0]
    inf = _branch(net, xb, yb, cfg, "linf")
    two = _branch(net, xb, yb, cfg, "l2")
    v_inf, v_two = float(inf.losses.mean()), float(two.losses.mean())
    value = (1.0 - a) * v_inf + a * v_two
    grads = inf.pullback(inf.grad_u * ((1.0 - a) / b)) + two.pullback(two.grad_u * (a / b))
    per_sample = (1.0 - a) * inf.losses + a * two.losses
    return LossResult(value, grads, per_sample, {"linf": v_inf, "l2": v_two})


def _max_terms(inf: _Branch, two: _Branch, b: int):
    """Per-sample max of both losses; ties go to l-inf."""
    pick_inf = inf.losses >= two.losses
    per_sample = np.where(pick_inf, inf.losses, two.losses)
    g_inf = inf.grad_u * (pick_inf[:, None] / b)
    g_two = two.grad_u * (~pick_inf[:, None] / b)
    return per_sample, g_inf, g_two


def max_loss(net: Network, x, y, cfg: LossConfig) -> LossResult:
    xb, yb = _prepare(net, x, y)
    inf = _branch(net, xb, yb, cfg, "linf")
    two = _branch(net, xb, yb, cfg, "l2")
    per_sample, g_inf, g_two = _max_terms(inf, two, xb.shape[0])
    grads = inf.pullback(g_inf) + two.pullback(g_two)
    return LossResult(
        float(per_sample.mean()), grads, per_sample,
        {"linf": float(inf.losses.mean()), "l2": float(two.losses.mean())},
    )


def random_split(batch_size: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded split of range(batch_size) into two blocks whose sizes differ by at most one."""
    if batch_size < 2:
        raise ValueError(f"random split needs at least 2 samples, got {batch_size}")
    perm = np.random.default_rng(seed).permutation(batch_size)
    half = (batch_size + 1) // 2
    return np.sort(perm[:half]), np.sort(perm[half:])


def random_loss(net: Network, x, y, cfg: LossConfig, seed: Optional[int] = None) -> LossResult:
    """l-inf loss on one random half of the batch plus l2 loss on the other half."""
    xb, yb = _prepare(net, x, y)
    first, second = random_split(xb.shape[0], cfg.seed if seed is None else seed)
    inf = _single_norm(net, xb[first], yb[first], cfg, "linf")
    two = _single_norm(net, xb[second], yb[second], cfg, "l2")
    per_sample = np.empty(xb.shape[0])
    per_sample[first] = inf.per_sample
    per_sample[second] = two.per_sample
    return LossResult(
        inf.value + two.value, inf.grads + two.grads, per_sample,
        {"linf": inf.value, "l2": two.value},
    )


# =========================
# Bound alignment
# =========================

def certified_subset(bounds: LogitDiffBounds) -> CertifiedSubset:
    """Samples whose every non-true-class bound is <= 0."""
    return CertifiedSubset(np.flatnonzero(bounds.worst() <= 0.0))


def bound_distribution(bounds: LogitDiffBounds) -> BoundDiffDistribution:
    return BoundDiffDistribution(log_softmax(bounds.others(), axis=1))


def _kl_rows(log_p: np.ndarray, log_r: np.ndarray) -> np.ndarray:
    # 0 * log(0/r) is 0, so an underflowed p contributes nothing
    return (np.exp(log_p) * (log_p - log_r)).sum(axis=1)


def kl_alignment_loss(d_q: BoundDiffDistribution, d_r: BoundDiffDistribution, subset: CertifiedSubset) -> float:
    """Mean over the subset of KL(d_q || d_r); 0 for an empty subset."""
    if subset.n_c == 0:
        return 0.0
    rows = _kl_rows(d_q.log_probs[subset.indices], d_r.log_probs[subset.indices])
    return float(rows.mean())


def _kl_terms(bq: LogitDiffBounds, br: LogitDiffBounds, subset: CertifiedSubset):
    """
    KL value and its gradients w.r.t. the full (B, k) bound arrays of both
    branches, computed in log space from the raw bounds.
    """
    shape = bq.upper.shape
    if subset.n_c == 0:
        return 0.0, np.zeros(shape), np.zeros(shape)
    d_q, d_r = bound_distribution(bq), bound_distribution(br)
    log_p, log_r = d_q.log_probs, d_r.log_probs
    p, r = d_q.probs, d_r.probs
    per_sample = _kl_rows(log_p, log_r)
    weight = subset.mask(shape[0])[:, None] / subset.n_c
    grad_q = weight * p * ((log_p - log_r) - per_sample[:, None])
    grad_r = weight * (r - p)
    value = float(per_sample[subset.indices].mean())
    return value, _scatter_others(bq, grad_q), _scatter_others(br, grad_r)


def _scatter_others(bounds: LogitDiffBounds, others: np.ndarray) -> np.ndarray:
    b, k = bounds.upper.shape
    full = np.zeros((b, k))
    keep = np.ones((b, k), dtype=bool)
    keep[np.arange(b), bounds.labels] = False
    full[keep] = others.reshape(-1)
    return full


def _full_eps_bounds(net: Network, x: np.ndarray, y: np.ndarray, cfg: LossConfig) -> LogitDiffBounds:
    if cfg.q_norm == "linf":
        return logit_diff_upper(net, BoxBounds.linf_ball(x, cfg.eps_inf), y, elide_last=cfg.elide_last)
    return l2_logit_diff_upper(net, x, y, cfg.eps_2, elide_last=cfg.elide_last)


def l1_penalty(net: Network, weight: float) -> Tuple[float, UpdateDelta]:
    """weight * sum |theta| over every parameter, and its (sub)gradient."""
    flat = net.flat_parameters()
    value = weight * float(sum(np.abs(v).sum() for v in flat))
    return value, UpdateDelta([weight * np.sign(v) for v in flat])


def scratch_loss(net: Network, x, y, cfg: LossConfig, use_kl: bool = True) -> LossResult:
    """
    Max loss + eta * KL bound alignment on the certified q-norm subset
    + l1 regularization. Both norms' small-box bounds are computed once.
    """
    xb, yb = _prepare(net, x, y)
    b = xb.shape[0]
    inf = _branch(net, xb, yb, cfg, "linf")
    two = _branch(net, xb, yb, cfg, "l2")
    per_sample, g_inf, g_two = _max_terms(inf, two, b)
    max_value = float(per_sample.mean())

    q, r = (inf, two) if cfg.q_norm == "linf" else (two, inf)
    if cfg.subset_source == "full_eps":
        subset = certified_subset(_full_eps_bounds(net, xb, yb, cfg))
    else:
        subset = certified_subset(q.bounds)
    kl_value, kl_q, kl_r = _kl_terms(q.bounds, r.bounds, subset)

    value = max_value
    if use_kl and cfg.eta > 0:
        value = value + cfg.eta * kl_value
        if q is inf:
            g_inf, g_two = g_inf + cfg.eta * kl_q, g_two + cfg.eta * kl_r
        else:
            g_inf, g_two = g_inf + cfg.eta * kl_r, g_two + cfg.eta * kl_q
    grads = inf.pullback(g_inf) + two.pullback(g_two)

    l1_value, l1_grads = l1_penalty(net, cfg.l1_weight)
    components = {
        "linf": float(inf.losses.mean()),
        "l2": float(two.losses.mean()),
        "kl": kl_value,
        "l1": l1_value,
    }
    return LossResult(value + l1_value, grads + l1_grads, per_sample, components, n_c=subset.n_c)


# =========================
# Warm-up regularization
# =========================

# keeps u / (u - l + delta) finite for degenerate intervals
_BALANCE_DELTA = 1e-12


def warmup_regularizer(net: Network, x, eps_inf: float, tight_coef: float, relu_coef: float) -> LossResult:
    """
    Bound-tightness plus ReLU-balance penalty on the clamped eps-box.

    tightness: mean radius of the output box.
    balance:   sum over ReLU layers of (mean clip(u / (u - l + delta), 0, 1) - 0.5)^2,
               with (l, u) the pre-activation bounds.
    """
    xb, _ = net.as_batch(x)
    tape = BoxTape(net, BoxBounds.linf_ball(xb, eps_inf))
    out_l, out_u = tape.bounds[-1]
    tight = float(((out_u - out_l) / 2.0).mean())
    g_out = np.full_like(out_u, tight_coef / (2.0 * out_u.size))

    balance = 0.0
    injected = {}
    for i, layer in enumerate(net.layers):
        if layer.kind != "relu" or i == 0:
            continue
        lo, hi = tape.layer_output(i - 1)
        width = hi - lo + _BALANCE_DELTA
        ratio = hi / width
        rho = float(np.clip(ratio, 0.0, 1.0).mean())
        balance += (rho - 0.5) ** 2
        inside = (ratio > 0.0) & (ratio < 1.0)
        scale = relu_coef * 2.0 * (rho - 0.5) / ratio.size
        g_hi = np.where(inside, scale * (_BALANCE_DELTA - lo) / width ** 2, 0.0)
        g_lo = np.where(inside, scale * hi / width ** 2, 0.0)
        injected[i - 1] = (g_lo, g_hi)

    grads = tape.backward(-g_out, g_out, injected=injected)
    value = tight_coef * tight + relu_coef * balance
    return LossResult(value, grads, np.zeros(xb.shape[0]), {"tight": tight, "balance": balance})
