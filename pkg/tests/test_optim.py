# tests/test_optim.py
# -------------------------------------------------------------------
# Adam updates and the epsilon / lambda / learning-rate schedule.
# -------------------------------------------------------------------

import numpy as np
import pytest

from src.cure_training.config import TrainConfig
from src.cure_training.errors import ArchitectureMismatchError
from src.cure_training.nn import Affine, Network, UpdateDelta
from src.cure_training.optim import AdamState, Schedule, adam_step


# ---------- Helpers ----------

def tiny_net() -> Network:
    return Network([Affine((2,), np.array([[1.0, -1.0], [0.5, 2.0]]), np.array([0.0, 0.1]))], 2, (2,))


def make_schedule(**overrides) -> Schedule:
    base = dict(
        eps_inf=0.3, eps_2=1.0, lambda_inf=0.6, lambda_2=0.1, lr=1.0,
        lr_decay_epochs=(2, 4), lr_decay_factor=0.5, anneal_epochs=2, steps_per_epoch=5,
        warmup_tight_coef=0.5, warmup_relu_coef=0.25,
    )
    base.update(overrides)
    return Schedule(**base)


# ---------- Tests: Adam ----------

def test_first_adam_step_moves_by_lr_times_sign():
    net = tiny_net()
    state = AdamState.zeros(net)
    grads = UpdateDelta([np.array([0.5, -2.0, 0.0, 0.2, 3.0, -0.1])])
    out = adam_step(state, net, grads, lr=0.01)
    moved = out.flat_parameters()[0] - net.flat_parameters()[0]
    np.testing.assert_allclose(moved, -0.01 * np.sign(grads.layers[0]), atol=1e-7)
    assert state.t == 1


def test_adam_state_updates_in_place_and_clone_is_independent():
    net = tiny_net()
    state = AdamState.zeros(net)
    copy = state.clone()
    adam_step(state, net, UpdateDelta([np.ones(6)]), lr=0.1)
    assert state.t == 1 and copy.t == 0
    assert state.m.layers[0].any()
    assert not copy.m.layers[0].any()


def test_adam_step_rejects_wrong_layout():
    net = tiny_net()
    with pytest.raises(ArchitectureMismatchError):
        adam_step(AdamState.zeros(net), net, UpdateDelta([np.ones(5)]), lr=0.1)


def test_zero_learning_rate_keeps_parameters():
    net = tiny_net()
    out = adam_step(AdamState.zeros(net), net, UpdateDelta([np.ones(6)]), lr=0.0)
    np.testing.assert_array_equal(out.flat_parameters()[0], net.flat_parameters()[0])


# ---------- Tests: Schedule ----------

@pytest.mark.parametrize("shape", ["linear", "smooth"])
def test_ramp_is_monotone_and_ends_at_final_values(shape):
    sched = make_schedule(shape=shape)
    values = [sched.eps(s)[0] for s in range(sched.anneal_steps + 3)]
    assert all(b >= a for a, b in zip(values, values[1:]))
    assert values[0] > 0.0
    last = sched.anneal_steps - 1
    assert sched.eps(last) == (0.3, 1.0)
    assert sched.is_final(last)
    assert not sched.is_final(last - 1)


def test_linear_ramp_is_proportional_to_progress():
    sched = make_schedule()
    assert sched.progress(4) == pytest.approx(0.5)
    assert sched.eps(4)[0] == pytest.approx(0.15)
    assert sched.lambdas(4) == pytest.approx((0.3, 0.05))


def test_smooth_ramp_starts_slower_than_linear():
    linear = make_schedule(anneal_epochs=20)
    smooth = make_schedule(anneal_epochs=20, shape="smooth")
    assert smooth.eps(5)[0] < linear.eps(5)[0]


def test_zero_anneal_means_full_values_at_once():
    sched = make_schedule(anneal_epochs=0)
    assert sched.eps(0) == (0.3, 1.0)
    assert sched.warmup_weights(0) == (0.0, 0.0)


def test_lr_decays_at_milestones():
    sched = make_schedule()
    assert [sched.lr_at(e) for e in range(6)] == [1.0, 1.0, 0.5, 0.5, 0.25, 0.25]


def test_warmup_weights_fade_out_over_anneal():
    sched = make_schedule()
    tight, relu = sched.warmup_weights(0)
    assert tight == pytest.approx(0.5 * 0.9)
    assert relu == pytest.approx(0.25 * 0.9)
    assert sched.warmup_weights(sched.anneal_steps - 1) == (0.0, 0.0)


def test_from_config_resolves_lambda_preset():
    cfg = TrainConfig(eps_inf=0.1, lambda_inf=None, epochs=5, anneal_epochs=2, lr_decay_epochs=(3,))
    sched = Schedule.from_config(cfg, steps_per_epoch=4)
    assert sched.lambda_inf == 0.4
    assert sched.anneal_steps == 8
    assert sched.lr_decay_epochs == (3,)
