from __future__ import annotations
from typing import Callable, List, Tuple

import numpy as np

from .errors import ArchitectureMismatchError
from .logging_setup import get_logger
from .nn import Network, UpdateDelta
from .types import ProjectionReport

logger = get_logger("cure_training.projection")


def layer_cosine(g_n: np.ndarray, g_c: np.ndarray) -> float:
    """Cosine similarity of two flat layer updates; 0 when either is zero."""
    g_n = np.ravel(g_n)
    g_c = np.ravel(g_c)
    if g_n.size != g_c.size:
        raise ValueError(f"layer updates have different lengths {g_n.size} and {g_c.size}")
    denom = np.linalg.norm(g_n) * np.linalg.norm(g_c)
    if denom == 0:
        return 0.0
    return float(np.clip(np.dot(g_n, g_c) / denom, -1.0, 1.0))


def gp_layer(g_n: np.ndarray, g_c: np.ndarray, true_projection: bool = False) -> np.ndarray:
    """
    cos * g_n when the natural and certified updates agree (cos > 0), else 0.

    With ``true_projection`` the natural direction is rescaled to the
    projection of g_c onto it instead: cos * ||g_c|| / ||g_n|| * g_n.
    """
    cos = layer_cosine(g_n, g_c)
    if cos <= 0:
        return np.zeros_like(g_n, dtype=np.float64)
    if true_projection:
        return cos * np.linalg.norm(g_c) / np.linalg.norm(g_n) * g_n
    return cos * g_n


def project_update(
    g_n: UpdateDelta, g_c: UpdateDelta, beta: float = 0.8, true_projection: bool = False,
) -> Tuple[UpdateDelta, ProjectionReport]:
    if len(g_n.layers) != len(g_c.layers):
        raise ArchitectureMismatchError(
            f"natural update has {len(g_n.layers)} layers, certified update {len(g_c.layers)}"
        )
    cosines: List[float] = []
    kept: List[bool] = []
    projected = []
    for n_l, c_l in zip(g_n.layers, g_c.layers):
        cos = layer_cosine(n_l, c_l)
        cosines.append(cos)
        kept.append(cos > 0)
        projected.append(gp_layer(n_l, c_l, true_projection=true_projection))
    return UpdateDelta(projected), ProjectionReport(cosines, kept, beta)


def blended_step(f_r: Network, g_p: UpdateDelta, g_c: UpdateDelta, beta: float) -> Network:
    """f + beta * g_p + (1 - beta) * g_c."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    g_p.check_compatible(f_r)
    g_c.check_compatible(f_r)
    return f_r.with_flat([
        p + beta * gp + (1.0 - beta) * gc
        for p, gp, gc in zip(f_r.flat_parameters(), g_p.layers, g_c.layers)
    ])


def gp_round(
    f_r: Network,
    nat_epoch: Callable[[Network], Network],
    cert_epoch: Callable[[Network], Network],
    beta: float,
    true_projection: bool = False,
) -> Tuple[Network, ProjectionReport]:
    """
    One natural epoch and one certified epoch from the same snapshot, then
    f + beta * g_p + (1 - beta) * g_c.

    The blend is applied on top of the certified result as
    f_c + beta * (g_p - g_c), so beta = 0 returns the certified epoch exactly.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    natural = nat_epoch(f_r.copy())
    certified = cert_epoch(f_r.copy())
    g_n = UpdateDelta.between(f_r, natural)
    g_c = UpdateDelta.between(f_r, certified)
    g_p, report = project_update(g_n, g_c, beta=beta, true_projection=true_projection)
    blended = certified.with_flat([
        c + beta * (p - g) for c, p, g in zip(certified.flat_parameters(), g_p.layers, g_c.layers)
    ])
    logger.debug("gp round kept %d/%d layers", report.n_kept, len(report.kept))
    return blended, report
