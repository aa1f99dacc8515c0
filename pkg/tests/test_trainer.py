# tests/test_trainer.py
# -------------------------------------------------------------------
# Training engine: epoch phases, GP rounds, stop handling, checkpoints,
# divergence detection, fine-tuning and the mode registry.
# -------------------------------------------------------------------

import csv
import os

import numpy as np
import pytest

import src.cure_training.modes as modes
import src.cure_training.trainer as trainer_mod
from src.cure_training.checkpoint import load_checkpoint, save_checkpoint
from src.cure_training.config import TrainConfig
from src.cure_training.data import make_synthetic
from src.cure_training.errors import ArchitectureMismatchError, TrainingDivergedError
from src.cure_training.losses import LossResult
from src.cure_training.nn import UpdateDelta, backward_ce, build_architecture, init
from src.cure_training.optim import AdamState, Schedule
from src.cure_training.trainer import GP_COLUMNS, LOG_COLUMNS, Trainer, certified_epoch, standard_epoch


# =========================
# Helpers & fixtures
# =========================

def make_data(n: int = 32, k: int = 3, seed: int = 0):
    return make_synthetic(n, k, (1, 4, 4), seed=seed)


def make_cfg(**overrides) -> TrainConfig:
    base = dict(
        mode="max", arch="fc", epochs=3, anneal_epochs=1, lr=1e-3, lr_decay_epochs=(),
        batch_size=16, eps_inf=0.1, eps_2=0.3, lambda_inf=0.5, lambda_2=0.2,
        attack_steps=1, l1_weight=1e-6,
    )
    base.update(overrides)
    return TrainConfig(**base)


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


@pytest.fixture
def temporary_mode():
    """Register a throwaway training mode and remove it afterwards."""
    added = []

    def _register(name, func, **kwargs):
        modes.training_mode(name, **kwargs)(func)
        added.append(name)

    yield _register
    for name in added:
        modes._REGISTRY.pop(name, None)


# =========================
# Tests: full runs
# =========================

def test_train_writes_checkpoint_and_log(tmp_path):
    cfg = make_cfg()
    net, log = Trainer(cfg, make_data(), out_dir=str(tmp_path)).train()

    assert [row.mode for row in log.rows] == ["standard", "max", "max"]
    assert all(np.isfinite(row.loss_total) for row in log.rows)

    ckpt = tmp_path / "checkpoints" / "final.ckpt"
    restored = load_checkpoint(ckpt)
    for p, q in zip(restored.flat_parameters(), net.flat_parameters()):
        np.testing.assert_array_equal(p, q)

    rows = read_csv(tmp_path / "train_log.csv")
    assert len(rows) == 3
    assert list(rows[0].keys()) == LOG_COLUMNS
    assert not (tmp_path / "gp_report.csv").exists()


def test_certified_epochs_reach_final_eps_after_anneal(tmp_path):
    cfg = make_cfg(epochs=4, anneal_epochs=2)
    _, log = Trainer(cfg, make_data(), out_dir=str(tmp_path)).train()
    assert log.rows[1].eps_inf < cfg.eps_inf
    assert log.rows[2].eps_inf == cfg.eps_inf
    assert log.rows[3].eps_2 == cfg.eps_2


def test_training_is_deterministic():
    cfg = make_cfg(mode="scratch")
    a, _ = Trainer(cfg, make_data()).train()
    b, _ = Trainer(cfg, make_data()).train()
    for p, q in zip(a.flat_parameters(), b.flat_parameters()):
        np.testing.assert_array_equal(p, q)


@pytest.mark.parametrize("mode", ["linf", "l2", "joint", "max", "random", "scratch"])
def test_every_mode_trains_with_finite_loss(mode):
    cfg = make_cfg(mode=mode, epochs=2, gp_enabled=False)
    # 17 samples leave a one-sample tail batch
    _, log = Trainer(cfg, make_data(n=17)).train()
    assert log.rows[-1].mode == mode
    assert np.isfinite(log.rows[-1].loss_total)


def test_scratch_mode_runs_gp_rounds_after_anneal(tmp_path):
    cfg = make_cfg(mode="scratch", epochs=3, anneal_epochs=1, beta=0.8)
    net, log = Trainer(cfg, make_data(), out_dir=str(tmp_path)).train()
    assert [row.mode for row in log.rows] == ["standard", "scratch", "scratch+gp"]
    rows = read_csv(tmp_path / "gp_report.csv")
    assert list(rows[0].keys()) == GP_COLUMNS
    assert len(rows) == len(net.param_layers)
    assert {row["epoch"] for row in rows} == {"2"}


def test_gp_disabled_keeps_plain_scratch_epochs():
    cfg = make_cfg(mode="scratch", gp_enabled=False)
    _, log = Trainer(cfg, make_data()).train()
    assert [row.mode for row in log.rows] == ["standard", "scratch", "scratch"]
    assert not log.gp_rows


def test_gp_with_beta_zero_matches_plain_scratch_run():
    data = make_data()
    with_gp, _ = Trainer(make_cfg(mode="scratch", beta=0.0), data).train()
    without, _ = Trainer(make_cfg(mode="scratch", gp_enabled=False), data).train()
    for p, q in zip(with_gp.flat_parameters(), without.flat_parameters()):
        np.testing.assert_array_equal(p, q)


# =========================
# Tests: stop, checkpoints, divergence
# =========================

def test_stop_event_finishes_current_epoch_and_saves(tmp_path):
    t = Trainer(make_cfg(epochs=5), make_data(), out_dir=str(tmp_path))
    t._handle_stop()
    _, log = t.train()
    assert len(log.rows) == 1
    assert (tmp_path / "checkpoints" / "final.ckpt").exists()


def test_install_signal_handlers_registers_both(monkeypatch):
    calls = []
    monkeypatch.setattr(trainer_mod.signal, "signal", lambda sig, handler: calls.append(sig))
    Trainer(make_cfg(), make_data()).install_signal_handlers()
    assert set(calls) == {trainer_mod.signal.SIGINT, trainer_mod.signal.SIGTERM}


def test_periodic_checkpoints(tmp_path):
    cfg = make_cfg(epochs=4, checkpoint_every=2)
    Trainer(cfg, make_data(), out_dir=str(tmp_path)).train()
    names = sorted(os.listdir(tmp_path / "checkpoints"))
    assert names == ["epoch_0001.ckpt", "epoch_0003.ckpt", "final.ckpt"]


def test_non_finite_loss_raises_diverged(temporary_mode):
    def _nan_loss(net, x, y, cfg, ctx):
        return LossResult(float("nan"), UpdateDelta.zeros(net), np.zeros(len(y)), {"linf": float("nan")})

    temporary_mode("always_nan", _nan_loss)
    with pytest.raises(TrainingDivergedError) as info:
        Trainer(make_cfg(mode="always_nan"), make_data()).train()
    assert info.value.epoch == 1
    assert info.value.batch == 0


def test_custom_mode_receives_context(temporary_mode):
    seen = []

    def _spy(net, x, y, cfg, ctx):
        seen.append((ctx.seed, cfg.eps_inf))
        return LossResult(0.0, UpdateDelta.zeros(net), np.zeros(len(y)))

    temporary_mode("spy", _spy, includes_l1=True)
    Trainer(make_cfg(mode="spy", epochs=2), make_data()).train()
    assert len(seen) == 2
    assert seen[0][0] != seen[1][0]
    assert seen[1][1] == pytest.approx(0.1)


def test_registering_a_mode_twice_raises():
    with pytest.raises(ValueError):
        modes.training_mode("max")(lambda *a: None)


def test_unknown_mode_lookup_raises():
    with pytest.raises(ValueError):
        modes.get_mode("does-not-exist")


# =========================
# Tests: single epochs
# =========================

def test_standard_epoch_lowers_loss_on_separable_blobs():
    data = make_synthetic(64, 3, (1, 4, 4), seed=3, noise=0.02)
    net = init(build_architecture("linear", data.input_shape, 3), seed=0)
    before, _ = backward_ce(net, data.images, data.labels)
    trained, _ = standard_epoch(net, data, AdamState.zeros(net), lr=1e-2, batch_size=8, seed=0)
    after, _ = backward_ce(trained, data.images, data.labels)
    assert after < before


def test_standard_epoch_with_zero_lr_keeps_parameters():
    data = make_data()
    net = init(build_architecture("fc", data.input_shape, data.num_classes), seed=1)
    same, loss = standard_epoch(net, data, AdamState.zeros(net), lr=0.0, batch_size=8, seed=2)
    assert np.isfinite(loss)
    for p, q in zip(net.flat_parameters(), same.flat_parameters()):
        np.testing.assert_array_equal(p, q)


def test_standard_epoch_is_deterministic():
    data = make_data()
    net = init(build_architecture("fc", data.input_shape, data.num_classes), seed=1)
    a, loss_a = standard_epoch(net, data, AdamState.zeros(net), lr=1e-3, batch_size=8, seed=2)
    b, loss_b = standard_epoch(net, data, AdamState.zeros(net), lr=1e-3, batch_size=8, seed=2)
    assert loss_a == loss_b
    for p, q in zip(a.flat_parameters(), b.flat_parameters()):
        np.testing.assert_array_equal(p, q)


def test_certified_epoch_reports_schedule_values():
    data = make_data()
    cfg = make_cfg(mode="linf", epochs=4, anneal_epochs=2)
    net = init(build_architecture("fc", data.input_shape, data.num_classes), seed=0)
    schedule = Schedule.from_config(cfg, steps_per_epoch=2)
    _, stats = certified_epoch(net, data, AdamState.zeros(net), cfg, schedule, epoch=1)
    assert stats.step == 2
    assert stats.eps_inf == pytest.approx(0.1 * 2 / 4)
    assert stats.loss_l2 == 0.0
    assert stats.loss_linf > 0.0


# =========================
# Tests: fine-tuning
# =========================

def test_finetune_from_checkpoint(tmp_path):
    data = make_data()
    source, _ = Trainer(make_cfg(mode="linf", epochs=2), data).train()
    path = tmp_path / "source.ckpt"
    save_checkpoint(source, path)

    cfg = make_cfg(mode="finetune", finetune_source=str(path), epochs=4, finetune_fraction=0.5)
    net, log = Trainer(cfg, data, out_dir=str(tmp_path / "ft")).finetune()
    assert [row.mode for row in log.rows] == ["finetune", "finetune"]
    assert all(row.eps_inf == cfg.eps_inf for row in log.rows)
    assert all(row.lr == cfg.lr for row in log.rows)
    assert (tmp_path / "ft" / "checkpoints" / "final.ckpt").exists()
    assert any(not np.array_equal(p, q) for p, q in zip(net.flat_parameters(), source.flat_parameters()))


def test_finetune_rejects_other_architecture():
    data = make_data()
    other = init(build_architecture("linear", data.input_shape, data.num_classes), seed=0)
    cfg = make_cfg(mode="finetune", finetune_source="unused.ckpt")
    with pytest.raises(ArchitectureMismatchError):
        Trainer(cfg, data).finetune(other)
