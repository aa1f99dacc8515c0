"""
Registry of certified-training modes. Each mode maps a batch to a LossResult;
register new ones with ``@training_mode("name")``.
"""
from __future__ import annotations
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from .logging_setup import get_logger
from .losses import (
    LossConfig,
    LossResult,
    joint_loss,
    l2_loss,
    max_loss,
    random_loss,
    sabr_linf_loss,
    scratch_loss,
)
from .nn import Network

_logger = get_logger("cure_training.modes")


@dataclass
class StepContext:
    seed: int
    use_kl: bool = True


ModeLoss = Callable[[Network, np.ndarray, np.ndarray, LossConfig, StepContext], LossResult]


@dataclass
class _ModeSpec:
    name: str
    loss: ModeLoss
    includes_l1: bool


_REGISTRY: Dict[str, _ModeSpec] = {}


def training_mode(name: str, *, includes_l1: bool = False):
    """
    Register a loss for a training mode. ``includes_l1`` marks losses that
    already add the l1 term themselves.
    """
    def _decorator(func: ModeLoss):
        if name in _REGISTRY:
            raise ValueError(f"training mode {name!r} is already registered")
        _REGISTRY[name] = _ModeSpec(name=name, loss=func, includes_l1=includes_l1)
        _logger.debug("Registered training mode=%s loss=%s", name, func.__name__)
        return func
    return _decorator


def get_mode(name: str) -> _ModeSpec:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown training mode {name!r}; registered: {available_modes()}") from None


def available_modes() -> List[str]:
    return sorted(_REGISTRY)


@training_mode("linf")
def _linf(net, x, y, cfg, ctx):
    return sabr_linf_loss(net, x, y, cfg)


@training_mode("l2")
def _l2(net, x, y, cfg, ctx):
    return l2_loss(net, x, y, cfg)


@training_mode("joint")
def _joint(net, x, y, cfg, ctx):
    return joint_loss(net, x, y, cfg)


@training_mode("max")
def _max(net, x, y, cfg, ctx):
    return max_loss(net, x, y, cfg)


@training_mode("random")
def _random(net, x, y, cfg, ctx):
    return random_loss(net, x, y, cfg, seed=ctx.seed)


@training_mode("scratch", includes_l1=True)
def _scratch(net, x, y, cfg, ctx):
    return scratch_loss(net, x, y, cfg, use_kl=ctx.use_kl)


# fine-tuning optimizes the scratch objective at full eps
@training_mode("finetune", includes_l1=True)
def _finetune(net, x, y, cfg, ctx):
    return scratch_loss(net, x, y, cfg, use_kl=ctx.use_kl)
