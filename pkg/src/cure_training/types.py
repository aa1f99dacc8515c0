from __future__ import annotations
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Any, Dict, List, Optional

import numpy as np
from scipy.special import logsumexp


@dataclass
class BoxBounds:
    """Elementwise interval [lower, upper] over a (batched) activation."""
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=np.float64)
        self.upper = np.asarray(self.upper, dtype=np.float64)
        if self.lower.shape != self.upper.shape:
            raise ValueError(f"box bounds have shapes {self.lower.shape} and {self.upper.shape}")
        if np.any(self.lower > self.upper):
            raise ValueError("box lower bound exceeds upper bound")

    @classmethod
    def around(cls, center: np.ndarray, radius) -> "BoxBounds":
        center = np.asarray(center, dtype=np.float64)
        return cls(center - radius, center + radius)

    @classmethod
    def linf_ball(cls, x: np.ndarray, eps: float) -> "BoxBounds":
        """clamp((x - eps, x + eps), 0, 1)"""
        x = np.asarray(x, dtype=np.float64)
        return cls(np.clip(x - eps, 0.0, 1.0), np.clip(x + eps, 0.0, 1.0))

    @property
    def center(self) -> np.ndarray:
        return (self.upper + self.lower) / 2.0

    @property
    def radius(self) -> np.ndarray:
        return (self.upper - self.lower) / 2.0

    def contains(self, points: np.ndarray, slack: float = 0.0) -> bool:
        return bool(np.all(points >= self.lower - slack) and np.all(points <= self.upper + slack))

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.lower).all() and np.isfinite(self.upper).all())


@dataclass
class LogitDiffBounds:
    """
    Per-sample upper bounds on o_i - o_y. ``upper[j, y_j]`` is always 0.
    """
    upper: np.ndarray   # (B, k)
    labels: np.ndarray  # (B,)

    def others(self) -> np.ndarray:
        """(B, k-1) view without the true-class column, class order kept."""
        b, k = self.upper.shape
        keep = np.ones((b, k), dtype=bool)
        keep[np.arange(b), self.labels] = False
        return self.upper[keep].reshape(b, k - 1)

    def worst(self) -> np.ndarray:
        """max over i != y of the bound, per sample."""
        return self.others().max(axis=1)


@dataclass
class BoundDiffDistribution:
    """
    Softmax over the non-true-class logit-difference bounds, one row of
    length k-1 per sample, kept as log-probabilities. Every entry is
    strictly positive and rows sum to 1.
    """
    log_probs: np.ndarray

    def __post_init__(self):
        self.log_probs = np.atleast_2d(np.asarray(self.log_probs, dtype=np.float64))
        if not np.isfinite(self.log_probs).all():
            raise ValueError("bound-difference distribution needs strictly positive entries")
        if not np.allclose(np.exp(logsumexp(self.log_probs, axis=1)), 1.0, rtol=0.0, atol=1e-9):
            raise ValueError("bound-difference distribution rows must sum to 1")

    @classmethod
    def from_probs(cls, probs) -> "BoundDiffDistribution":
        probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
        if np.any(probs <= 0):
            raise ValueError("bound-difference distribution needs strictly positive entries")
        return cls(np.log(probs))

    @cached_property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)


@dataclass
class PropagationRegion:
    """Small box B(center, radius) chosen inside the clamped eps-region."""
    center: np.ndarray
    radius: np.ndarray
    lower_limit: np.ndarray
    upper_limit: np.ndarray

    def box(self) -> BoxBounds:
        # rounding in center +/- radius must not leave the eps-region
        lower = np.maximum(self.center - self.radius, self.lower_limit)
        upper = np.minimum(self.center + self.radius, self.upper_limit)
        return BoxBounds(np.minimum(lower, upper), upper)


@dataclass
class CertifiedSubset:
    indices: np.ndarray

    @property
    def n_c(self) -> int:
        return int(self.indices.size)

    def mask(self, batch_size: int) -> np.ndarray:
        m = np.zeros(batch_size, dtype=bool)
        m[self.indices] = True
        return m


@dataclass
class ProjectionReport:
    cosines: List[float]
    kept: List[bool]
    beta: float

    @property
    def n_kept(self) -> int:
        return sum(self.kept)

    def rows(self, epoch: int) -> List[Dict[str, Any]]:
        return [
            {"epoch": epoch, "layer": i, "cosine": c, "kept": int(k)}
            for i, (c, k) in enumerate(zip(self.cosines, self.kept))
        ]


@dataclass
class SampleVerdict:
    sample_id: int
    clean_correct: bool
    cert_linf: bool
    cert_l2: bool
    pgd_linf_robust: bool
    pgd_l2_robust: bool

    @property
    def union_cert(self) -> bool:
        return self.cert_linf and self.cert_l2

    def as_row(self) -> Dict[str, Any]:
        row = asdict(self)
        row["union_cert"] = self.union_cert
        return {k: int(v) if isinstance(v, bool) else v for k, v in row.items()}


@dataclass
class EvalReport:
    verdicts: List[SampleVerdict]
    config: Dict[str, Any] = field(default_factory=dict)
    version: str = ""
    bound_diffs: Optional[Dict[str, np.ndarray]] = None

    def _pct(self, attr: str) -> float:
        if not self.verdicts:
            return 0.0
        return 100.0 * sum(bool(getattr(v, attr)) for v in self.verdicts) / len(self.verdicts)

    @cached_property
    def aggregates(self) -> Dict[str, float]:
        return {
            "clean": self._pct("clean_correct"),
            "cert_linf": self._pct("cert_linf"),
            "cert_l2": self._pct("cert_l2"),
            "union": self._pct("union_cert"),
            "pgd_linf": self._pct("pgd_linf_robust"),
            "pgd_l2": self._pct("pgd_l2_robust"),
        }

    def to_json_dict(self) -> Dict[str, Any]:
        return {
            "version": self.version,
            "n_samples": len(self.verdicts),
            "aggregates": self.aggregates,
            "config": self.config,
        }
