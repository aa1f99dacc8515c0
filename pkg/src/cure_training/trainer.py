from __future__ import annotations
import csv
import math
import os
import signal
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import Dataset
from .errors import TrainingDivergedError
from .logging_setup import get_logger
from .losses import LossConfig, l1_penalty, warmup_regularizer
from .modes import StepContext, get_mode
from .nn import Network, backward_ce, build_architecture, init
from .optim import AdamState, Schedule, adam_step
from .projection import gp_round

logger = get_logger("cure_training.trainer")

LOG_COLUMNS = [
    "epoch", "step", "mode", "loss_total", "loss_linf", "loss_l2", "loss_kl",
    "eps_inf", "eps_2", "lr", "n_c", "wall_ms",
]
GP_COLUMNS = ["epoch", "layer", "cosine", "kept"]

# batch seeds: base + stride * epoch + batch index
_EPOCH_SEED_STRIDE = 100_003


@dataclass
class EpochStats:
    epoch: int
    step: int
    mode: str
    loss_total: float = 0.0
    loss_linf: float = 0.0
    loss_l2: float = 0.0
    loss_kl: float = 0.0
    eps_inf: float = 0.0
    eps_2: float = 0.0
    lr: float = 0.0
    n_c: int = 0
    wall_ms: float = 0.0


@dataclass
class TrainingLog:
    rows: List[EpochStats] = field(default_factory=list)
    gp_rows: List[Dict[str, Any]] = field(default_factory=list)

    def add(self, stats: EpochStats) -> None:
        self.rows.append(stats)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow(asdict(row))

    def write_gp_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=GP_COLUMNS)
            writer.writeheader()
            writer.writerows(self.gp_rows)


def _batch_seed(base: int, epoch: int, batch: int) -> int:
    return base + _EPOCH_SEED_STRIDE * epoch + batch


# =========================
# Epochs
# =========================

def standard_epoch(
    net: Network,
    data: Dataset,
    state: AdamState,
    lr: float,
    batch_size: int,
    seed: int,
) -> Tuple[Network, float]:
    """One cross-entropy pass over ``data`` shuffled with ``seed``; returns the mean batch loss."""
    losses = []
    for idx in data.batches(batch_size, seed=seed):
        loss, grads = backward_ce(net, data.images[idx], data.labels[idx])
        net = adam_step(state, net, grads, lr)
        losses.append(loss)
    return net, float(np.mean(losses))


def certified_epoch(
    net: Network,
    data: Dataset,
    state: AdamState,
    cfg: TrainConfig,
    schedule: Schedule,
    epoch: int,
    mode: Optional[str] = None,
    full_eps: bool = False,
) -> Tuple[Network, EpochStats]:
    """
    One pass of the mode's certified loss (+ l1, + warm-up regularizer while
    epsilon is still ramping). ``epoch`` is 1-based for the annealed phase;
    with ``full_eps`` the final epsilon is used throughout and no warm-up
    term is added.
    """
    mode = mode or cfg.mode
    spec = get_mode(mode)
    lr = cfg.lr if full_eps else schedule.lr_at(epoch)
    stats = EpochStats(epoch=epoch, step=0, mode=mode, lr=lr)
    started = time.perf_counter()
    totals: Dict[str, float] = {"total": 0.0, "linf": 0.0, "l2": 0.0, "kl": 0.0}
    n_batches = 0

    for b, idx in enumerate(data.batches(cfg.batch_size, seed=cfg.seed + epoch)):
        if mode == "random" and idx.size < 2:
            logger.debug("Skipping %d-sample tail batch in random mode", idx.size)
            continue
        step = (epoch - 1) * schedule.steps_per_epoch + b
        if full_eps:
            eps_inf, eps_2 = schedule.eps_inf, schedule.eps_2
            lam_inf, lam_2 = schedule.lambda_inf, schedule.lambda_2
            tight_w, relu_w = 0.0, 0.0
            use_kl = True
        else:
            eps_inf, eps_2 = schedule.eps(step)
            lam_inf, lam_2 = schedule.lambdas(step)
            tight_w, relu_w = schedule.warmup_weights(step)
            use_kl = not (cfg.kl_after_anneal and not schedule.is_final(step))
        seed = _batch_seed(cfg.seed, epoch, b)
        loss_cfg = LossConfig(
            eps_inf=eps_inf, eps_2=eps_2, lambda_inf=lam_inf, lambda_2=lam_2,
            alpha=cfg.alpha, eta=cfg.eta, q_norm=cfg.q_norm, l1_weight=cfg.l1_weight,
            elide_last=cfg.elide_last, attack_steps=cfg.attack_steps,
            attack_step_size=cfg.attack_step_size, l2_search=cfg.l2_search,
            l2_projection=cfg.l2_projection, subset_source=cfg.subset_source, seed=seed,
        )
        x, y = data.images[idx], data.labels[idx]
        result = spec.loss(net, x, y, loss_cfg, StepContext(seed=seed, use_kl=use_kl))
        total, grads = result.value, result.grads
        if not spec.includes_l1 and cfg.l1_weight > 0:
            l1_value, l1_grads = l1_penalty(net, cfg.l1_weight)
            total, grads = total + l1_value, grads + l1_grads
        if (tight_w > 0 or relu_w > 0) and eps_inf > 0:
            warm = warmup_regularizer(net, x, eps_inf, tight_w, relu_w)
            total, grads = total + warm.value, grads + warm.grads

        if not (math.isfinite(total) and grads.is_finite()):
            raise TrainingDivergedError(epoch, b, dict(result.components, loss_total=total))

        net = adam_step(state, net, grads, lr)
        totals["total"] += total
        for key in ("linf", "l2", "kl"):
            totals[key] += result.components.get(key, 0.0)
        stats.n_c += result.n_c
        stats.step = step + 1
        stats.eps_inf, stats.eps_2 = eps_inf, eps_2
        n_batches += 1

    n = max(n_batches, 1)
    stats.loss_total = totals["total"] / n
    stats.loss_linf = totals["linf"] / n
    stats.loss_l2 = totals["l2"] / n
    stats.loss_kl = totals["kl"] / n
    stats.wall_ms = 1000.0 * (time.perf_counter() - started)
    return net, stats


# =========================
# Engine
# =========================

class Trainer:
    """
    Runs the full recipe: one standard epoch, annealed certified epochs, then
    gradient-projection rounds (scratch mode) at the final epsilon.

    ``stop_event`` is checked between epochs; once set, the current epoch
    finishes, the checkpoint and log are written and training returns.
    """

    def __init__(
        self,
        cfg: TrainConfig,
        data: Dataset,
        out_dir: Optional[str] = None,
        stop_event: Optional[threading.Event] = None,
    ):
        self.cfg = cfg
        self.data = data
        self.out_dir = out_dir
        self.stop_event = stop_event or threading.Event()
        self.steps_per_epoch = math.ceil(len(data) / cfg.batch_size)
        self.schedule = Schedule.from_config(cfg, self.steps_per_epoch)
        logger.info(
            "Configured trainer: mode=%s arch=%s eps=(%s, %s) lambda=(%s, %s) epochs=%d anneal=%d "
            "batch=%d samples=%d seed=%d",
            cfg.mode, cfg.arch, cfg.eps_inf, cfg.eps_2, self.schedule.lambda_inf, cfg.lambda_2,
            cfg.epochs, cfg.anneal_epochs, cfg.batch_size, len(data), cfg.seed,
        )

    def install_signal_handlers(self) -> None:
        signal.signal(signal.SIGTERM, self._handle_stop)
        signal.signal(signal.SIGINT, self._handle_stop)

    def _handle_stop(self, *_):
        logger.info("Stop signal received; finishing the current epoch…")
        self.stop_event.set()

    # --- helpers -----------------------------------------------------------
    def initial_network(self) -> Network:
        net = build_architecture(self.cfg.arch, self.data.input_shape, self.data.num_classes)
        return init(net, scheme=self.cfg.init_scheme, seed=self.cfg.seed, gain=self.cfg.init_gain)

    def _checkpoint_path(self, name: str) -> Optional[str]:
        if not self.out_dir:
            return None
        return os.path.join(self.out_dir, "checkpoints", name)

    def _maybe_checkpoint(self, net: Network, epoch: int) -> None:
        every = self.cfg.checkpoint_every
        path = self._checkpoint_path(f"epoch_{epoch:04d}.ckpt")
        if path and every and (epoch + 1) % every == 0:
            save_checkpoint(net, path, dtype=self.cfg.checkpoint_dtype)

    def _finish(self, net: Network, log: TrainingLog) -> None:
        path = self._checkpoint_path("final.ckpt")
        if not path:
            return
        save_checkpoint(net, path, dtype=self.cfg.checkpoint_dtype)
        log.write_csv(os.path.join(self.out_dir, "train_log.csv"))
        if log.gp_rows:
            log.write_gp_csv(os.path.join(self.out_dir, "gp_report.csv"))

    def _log_epoch(self, stats: EpochStats) -> None:
        logger.info(
            "epoch=%d mode=%s loss=%.4f linf=%.4f l2=%.4f kl=%.4f eps=(%.4g, %.4g) lr=%.3g n_c=%d %.0fms",
            stats.epoch, stats.mode, stats.loss_total, stats.loss_linf, stats.loss_l2, stats.loss_kl,
            stats.eps_inf, stats.eps_2, stats.lr, stats.n_c, stats.wall_ms,
        )

    def _uses_gp(self, epoch: int) -> bool:
        cfg = self.cfg
        return cfg.gp_enabled and cfg.mode == "scratch" and epoch > cfg.anneal_epochs

    # --- runs --------------------------------------------------------------
    def _standard(self, net: Network, state: AdamState, epoch: int) -> Tuple[Network, EpochStats]:
        started = time.perf_counter()
        lr = self.schedule.lr_at(epoch)
        net, loss = standard_epoch(net, self.data, state, lr, self.cfg.batch_size, self.cfg.seed + epoch)
        stats = EpochStats(epoch=epoch, step=0, mode="standard", loss_total=loss, lr=lr,
                           wall_ms=1000.0 * (time.perf_counter() - started))
        return net, stats

    def _gp_round(self, net: Network, state: AdamState, epoch: int, log: TrainingLog) -> Tuple[Network, EpochStats]:
        cfg = self.cfg
        first_step = (epoch - 1) * self.steps_per_epoch
        if not self.schedule.is_final(first_step):
            raise RuntimeError(f"gradient projection requested at epoch {epoch} before epsilon is final")
        started = time.perf_counter()
        cert_stats: List[EpochStats] = []
        natural_state = state.clone()

        def natural(f: Network) -> Network:
            out, _ = standard_epoch(f, self.data, natural_state, self.schedule.lr_at(epoch),
                                    cfg.batch_size, cfg.seed + epoch)
            return out

        def certified(f: Network) -> Network:
            out, stats = certified_epoch(f, self.data, state, cfg, self.schedule, epoch)
            cert_stats.append(stats)
            return out

        net, report = gp_round(net, natural, certified, cfg.beta, true_projection=cfg.gp_true_projection)
        log.gp_rows.extend(report.rows(epoch))
        logger.info("GP round epoch=%d kept %d/%d layers (beta=%.2f)",
                    epoch, report.n_kept, len(report.kept), cfg.beta)
        stats = cert_stats[0]
        stats.mode = "scratch+gp"
        stats.wall_ms = 1000.0 * (time.perf_counter() - started)
        return net, stats

    def train(self, net: Optional[Network] = None) -> Tuple[Network, TrainingLog]:
        cfg = self.cfg
        net = net if net is not None else self.initial_network()
        state = AdamState.zeros(net)
        log = TrainingLog()
        logger.info("Training %d parameters for %d epoch(s)", net.num_parameters, cfg.epochs)
        for epoch in range(cfg.epochs):
            if epoch == 0:
                net, stats = self._standard(net, state, epoch)
            elif self._uses_gp(epoch):
                net, stats = self._gp_round(net, state, epoch, log)
            else:
                net, stats = certified_epoch(net, self.data, state, cfg, self.schedule, epoch)
            log.add(stats)
            self._log_epoch(stats)
            self._maybe_checkpoint(net, epoch)
            if self.stop_event.is_set():
                logger.warning("Stopping after epoch %d of %d", epoch + 1, cfg.epochs)
                break
        self._finish(net, log)
        return net, log

    def finetune(self, source: Optional[Network] = None) -> Tuple[Network, TrainingLog]:
        """
        Scratch-loss epochs at full epsilon on a pre-trained network; no
        annealing, warm-up or gradient projection.
        """
        cfg = self.cfg
        if source is None:
            source = load_checkpoint(cfg.finetune_source)
        expected = build_architecture(cfg.arch, self.data.input_shape, self.data.num_classes)
        expected.check_same_architecture(source)
        net = source
        state = AdamState.zeros(net)
        log = TrainingLog()
        n_epochs = cfg.finetune_epochs
        logger.info("Fine-tuning for %d epoch(s) (%.0f%% of %d)", n_epochs, 100 * cfg.finetune_fraction, cfg.epochs)
        for epoch in range(n_epochs):
            net, stats = certified_epoch(net, self.data, state, cfg, self.schedule, epoch + 1,
                                         mode="finetune", full_eps=True)
            stats.epoch = epoch
            log.add(stats)
            self._log_epoch(stats)
            self._maybe_checkpoint(net, epoch)
            if self.stop_event.is_set():
                logger.warning("Stopping fine-tuning after epoch %d of %d", epoch + 1, n_epochs)
                break
        self._finish(net, log)
        return net, log


def train(cfg: TrainConfig, data: Dataset, out_dir: Optional[str] = None) -> Tuple[Network, TrainingLog]:
    return Trainer(cfg, data, out_dir=out_dir).train()


def finetune(
    cfg: TrainConfig, data: Dataset, source: Optional[Network] = None, out_dir: Optional[str] = None,
) -> Tuple[Network, TrainingLog]:
    return Trainer(cfg, data, out_dir=out_dir).finetune(source)
