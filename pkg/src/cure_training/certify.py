from __future__ import annotations
import csv
import json
import os
import threading
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from .attacks import AttackConfig, get_propagation_region, pgd_robust_mask
from .data import Dataset
from .errors import ReportFormatError
from .ibp import l2_logit_diff_upper, logit_diff_upper
from .logging_setup import get_logger
from .nn import Network, check_labels, forward
from .types import BoxBounds, EvalReport, LogitDiffBounds, SampleVerdict

logger = get_logger("cure_training.certify")

PathLike = Union[str, os.PathLike]

EVAL_STEPS = 50
EVAL_RESTARTS = 3
VERDICT_COLUMNS = [
    "sample_id", "clean_correct", "cert_linf", "cert_l2", "union_cert", "pgd_linf_robust", "pgd_l2_robust",
]
TABLE_COLUMNS = ["method", "clean", "linf", "l2", "union"]


def _flags(bounds: LogitDiffBounds, single: bool):
    ok = bounds.worst() < 0.0
    return bool(ok[0]) if single else ok


def clean_correct(net: Network, x, y) -> np.ndarray:
    xb, _ = net.as_batch(x)
    return forward(net, xb).argmax(axis=1) == check_labels(y, net.num_classes)


def certify_linf(net: Network, x, y, eps_inf: float, elide_last: bool = True):
    """True where every point of clamp(x +/- eps, 0, 1) is classified as y."""
    xb, single = net.as_batch(x)
    bounds = logit_diff_upper(net, BoxBounds.linf_ball(xb, eps_inf), y, elide_last=elide_last)
    return _flags(bounds, single)


def certify_l2(net: Network, x, y, eps_2: float, elide_last: bool = True):
    """Sound (incomplete) l2 certificate with the Cauchy-Schwarz first layer."""
    xb, single = net.as_batch(x)
    return _flags(l2_logit_diff_upper(net, xb, y, eps_2, elide_last=elide_last), single)


def certify_l2_bounding_box(net: Network, x, y, eps_2: float, elide_last: bool = True):
    """l2 certificate through the l-inf box that contains the l2 ball."""
    return certify_linf(net, x, y, eps_2, elide_last=elide_last)


def union_accuracy(verdicts: Sequence[SampleVerdict]) -> float:
    if not verdicts:
        return 0.0
    return 100.0 * sum(v.union_cert for v in verdicts) / len(verdicts)


def empirical_accuracy(net: Network, data: Dataset, attack_cfg: AttackConfig) -> float:
    """Percent of samples correct at x and at every PGD iterate."""
    robust = pgd_robust_mask(net, data.images, data.labels, attack_cfg)
    return 100.0 * float(robust.mean())


# =========================
# Bound differences
# =========================

BOUND_DIFF_COLUMNS = ["sample_id", "label", "norm", "class", "diff"]


def bound_diff_arrays(
    net: Network,
    x,
    y,
    eps_inf: float,
    eps_2: float,
    lambda_inf: Optional[float] = None,
    lambda_2: Optional[float] = None,
    attack_steps: int = 8,
    seed: int = 0,
) -> Dict[str, np.ndarray]:
    """
    lower(o_y) - upper(o_i) for every i != y, shape (B, k-1) per norm: the
    negated logit-difference bound. Without a lambda the bounds cover the
    full region; with one they cover the small box of that ratio around a
    PGD point.
    """
    xb, _ = net.as_batch(x)
    yb = check_labels(y, net.num_classes)

    def _small_box(norm: str, eps: float, lam: float) -> LogitDiffBounds:
        region = get_propagation_region(net, xb, yb, eps, lam, attack_steps, 0.25, norm, seed=seed)
        return logit_diff_upper(net, region.box(), yb)

    if lambda_inf is None:
        b_inf = logit_diff_upper(net, BoxBounds.linf_ball(xb, eps_inf), yb)
    else:
        b_inf = _small_box("linf", eps_inf, lambda_inf)
    if lambda_2 is None:
        b_two = l2_logit_diff_upper(net, xb, yb, eps_2)
    else:
        b_two = _small_box("l2", eps_2, lambda_2)
    return {"labels": yb, "linf": -b_inf.others(), "l2": -b_two.others()}


def bound_diff_rows(diffs: Dict[str, np.ndarray], sample_ids: Optional[Sequence[int]] = None) -> List[Dict[str, Any]]:
    labels = diffs["labels"]
    k = diffs["linf"].shape[1] + 1
    ids = list(range(len(labels))) if sample_ids is None else list(sample_ids)
    classes = np.arange(k)
    rows: List[Dict[str, Any]] = []
    for norm in ("linf", "l2"):
        for j, label in enumerate(labels):
            for cls, diff in zip(classes[classes != label], diffs[norm][j]):
                rows.append({"sample_id": ids[j], "label": int(label), "norm": norm,
                             "class": int(cls), "diff": float(diff)})
    return rows


def _write_bound_diffs(rows: List[Dict[str, Any]], path: PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=BOUND_DIFF_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def export_bound_diffs(
    net: Network,
    x,
    y,
    eps_inf: float,
    eps_2: float,
    lambda_inf: Optional[float],
    lambda_2: Optional[float],
    path: PathLike,
    **kwargs: Any,
) -> int:
    rows = bound_diff_rows(bound_diff_arrays(net, x, y, eps_inf, eps_2, lambda_inf, lambda_2, **kwargs))
    _write_bound_diffs(rows, path)
    logger.info("Wrote %d bound differences to %s", len(rows), path)
    return len(rows)


# =========================
# Evaluation
# =========================

def _verdict_chunk(
    net: Network,
    data: Dataset,
    lo: int,
    hi: int,
    eps_inf: float,
    eps_2: float,
    attack_steps: int,
    restarts: int,
    seed: int,
    slots: List[Optional[SampleVerdict]],
) -> None:
    x, y = data.images[lo:hi], data.labels[lo:hi]
    clean = clean_correct(net, x, y)
    c_inf = certify_linf(net, x, y, eps_inf)
    c_two = certify_l2(net, x, y, eps_2)
    # per-sample attack seeds follow the global sample index
    p_inf = pgd_robust_mask(net, x, y, AttackConfig("linf", eps_inf, attack_steps, 0.25, seed + lo, restarts))
    p_two = pgd_robust_mask(net, x, y, AttackConfig("l2", eps_2, attack_steps, 0.25, seed + lo, restarts))
    for j in range(hi - lo):
        slots[lo + j] = SampleVerdict(
            sample_id=lo + j,
            clean_correct=bool(clean[j]),
            cert_linf=bool(c_inf[j]),
            cert_l2=bool(c_two[j]),
            pgd_linf_robust=bool(p_inf[j]),
            pgd_l2_robust=bool(p_two[j]),
        )


def evaluate(
    net: Network,
    data: Dataset,
    eps_inf: float,
    eps_2: float,
    attack_steps: int = EVAL_STEPS,
    restarts: int = EVAL_RESTARTS,
    seed: int = 0,
    worker_threads: int = 1,
    config: Optional[Dict[str, Any]] = None,
    version: str = "",
    with_bound_diffs: bool = False,
) -> EvalReport:
    """
    Per-sample verdicts for ``data``. Samples are split into contiguous
    chunks, one per worker thread; results land in index-addressed slots.
    """
    n = len(data)
    slots: List[Optional[SampleVerdict]] = [None] * n
    workers = max(1, min(worker_threads, n))
    bounds = np.linspace(0, n, workers + 1).astype(int)
    errors: List[BaseException] = []

    def _run(lo: int, hi: int) -> None:
        try:
            _verdict_chunk(net, data, lo, hi, eps_inf, eps_2, attack_steps, restarts, seed, slots)
        except BaseException as e:
            logger.error("[certify] chunk %d:%d failed: %s", lo, hi, e, exc_info=True)
            errors.append(e)

    threads = []
    for i in range(workers):
        lo, hi = int(bounds[i]), int(bounds[i + 1])
        if lo == hi:
            continue
        t = threading.Thread(target=_run, args=(lo, hi), daemon=True, name=f"certify-worker-{i}")
        t.start()
        threads.append(t)
    for t in threads:
        t.join()
    if errors:
        raise errors[0]

    report = EvalReport(verdicts=[v for v in slots if v is not None], config=dict(config or {}), version=version)
    if with_bound_diffs:
        report.bound_diffs = bound_diff_arrays(net, data.images, data.labels, eps_inf, eps_2)
    agg = report.aggregates
    logger.info(
        "Evaluated %d samples: clean=%.1f cert_linf=%.1f cert_l2=%.1f union=%.1f pgd_linf=%.1f pgd_l2=%.1f",
        n, agg["clean"], agg["cert_linf"], agg["cert_l2"], agg["union"], agg["pgd_linf"], agg["pgd_l2"],
    )
    return report


def write_report(report: EvalReport, out_dir: PathLike) -> None:
    """eval_report.json, verdicts.csv and (when present) bound_diffs.csv in ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "eval_report.json"), "w", encoding="utf-8") as f:
        json.dump(report.to_json_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(out_dir, "verdicts.csv"), "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=VERDICT_COLUMNS)
        writer.writeheader()
        for v in report.verdicts:
            writer.writerow(v.as_row())
    if report.bound_diffs is not None:
        _write_bound_diffs(bound_diff_rows(report.bound_diffs), os.path.join(out_dir, "bound_diffs.csv"))


_TABLE_SOURCES = {"clean": "clean", "linf": "cert_linf", "l2": "cert_l2", "union": "union"}


def read_aggregates(path: PathLike) -> Dict[str, float]:
    """The ``aggregates`` block of an eval_report.json; every table column must be present."""
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    agg = payload.get("aggregates") if isinstance(payload, dict) else None
    if not isinstance(agg, dict):
        raise ReportFormatError(str(path), "aggregates")
    for key in _TABLE_SOURCES.values():
        if not isinstance(agg.get(key), (int, float)):
            raise ReportFormatError(str(path), f"aggregates.{key}")
    return agg


def write_comparison(reports: Dict[str, PathLike], path: PathLike) -> List[Dict[str, Any]]:
    """One row per method: clean, l-inf, l2 and union certified accuracy."""
    rows = []
    for method, report_path in reports.items():
        agg = read_aggregates(report_path)
        row: Dict[str, Any] = {"method": method}
        row.update({col: round(float(agg[key]), 2) for col, key in _TABLE_SOURCES.items()})
        rows.append(row)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=TABLE_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return rows
