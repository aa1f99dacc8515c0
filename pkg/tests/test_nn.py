# tests/test_nn.py
# -------------------------------------------------------------------
# Layers, networks, exact gradients and initialization.
# -------------------------------------------------------------------

import numpy as np
import pytest

from src.cure_training.errors import ArchitectureMismatchError, InvalidLabelError, ShapeMismatchError
from src.cure_training.nn import (
    Affine,
    Conv2d,
    Network,
    UpdateDelta,
    backward_ce,
    build_architecture,
    check_labels,
    forward,
    init,
    input_gradient_ce,
)


# ---------- Helpers ----------

def make_net(arch: str = "fc", shape=(1, 8, 8), k: int = 3, seed: int = 0, gain: float = 1.0) -> Network:
    return init(build_architecture(arch, shape, k), "shi", seed=seed, gain=gain)


def make_batch(n: int = 5, shape=(1, 8, 8), k: int = 3, seed: int = 1):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 1.0, size=(n,) + tuple(shape)), rng.integers(0, k, size=n)


def mean_ce(net: Network, x, y) -> float:
    loss, _ = backward_ce(net, x, y)
    return loss


def assert_close(a: float, b: float, rtol: float = 1e-5, atol: float = 1e-7):
    assert abs(a - b) <= atol + rtol * max(abs(a), abs(b)), (a, b)


# ---------- Tests: forward ----------

def test_forward_single_sample_and_batch_agree():
    net = make_net()
    x, _ = make_batch(4)
    batch = forward(net, x)
    assert batch.shape == (4, 3)
    np.testing.assert_allclose(forward(net, x[2]), batch[2])


def test_forward_rejects_wrong_input_shape():
    net = make_net()
    with pytest.raises(ShapeMismatchError):
        forward(net, np.zeros((2, 1, 7, 7)))


def test_affine_forward_is_wx_plus_b():
    w = np.array([[1.0, -2.0], [0.5, 3.0]])
    b = np.array([0.1, -0.2])
    layer = Affine((2,), w, b)
    x = np.array([[1.0, 2.0]])
    np.testing.assert_allclose(layer.forward(x), [[1.0 - 4.0 + 0.1, 0.5 + 6.0 - 0.2]])


def test_conv_forward_matches_direct_loop():
    rng = np.random.default_rng(3)
    w = rng.normal(size=(2, 1, 3, 3))
    b = rng.normal(size=2)
    layer = Conv2d((1, 5, 5), w, b, stride=2, padding=1)
    x = rng.normal(size=(1, 1, 5, 5))
    out = layer.forward(x)
    assert out.shape == (1, 2, 3, 3)

    padded = np.pad(x[0, 0], 1)
    for o in range(2):
        for i in range(3):
            for j in range(3):
                patch = padded[2 * i:2 * i + 3, 2 * j:2 * j + 3]
                assert out[0, o, i, j] == pytest.approx(float((patch * w[o, 0]).sum() + b[o]))


# ---------- Tests: gradients ----------

@pytest.mark.parametrize("arch", ["linear", "fc", "cnn4"])
def test_backward_ce_matches_finite_differences(arch):
    net = make_net(arch)
    x, y = make_batch(4)
    _, grads = backward_ce(net, x, y)
    rng = np.random.default_rng(7)
    h = 1e-4
    for n, vec in enumerate(net.flat_parameters()):
        for idx in rng.choice(vec.size, size=min(5, vec.size), replace=False):
            plus = [v.copy() for v in net.flat_parameters()]
            minus = [v.copy() for v in net.flat_parameters()]
            plus[n][idx] += h
            minus[n][idx] -= h
            fd = (mean_ce(net.with_flat(plus), x, y) - mean_ce(net.with_flat(minus), x, y)) / (2 * h)
            assert_close(grads.layers[n][idx], fd)


def test_input_gradient_matches_finite_differences():
    net = make_net("cnn4")
    x, y = make_batch(2)
    losses, logits, gx = input_gradient_ce(net, x, check_labels(y, 3))
    assert losses.shape == (2,)
    assert logits.shape == (2, 3)
    h = 1e-4
    for flat_idx in (0, 17, 40):
        xp, xm = x.copy(), x.copy()
        xp.reshape(2, -1)[:, flat_idx] += h
        xm.reshape(2, -1)[:, flat_idx] -= h
        lp, _, _ = input_gradient_ce(net, xp, y)
        lm, _, _ = input_gradient_ce(net, xm, y)
        for j in range(2):
            assert_close(gx.reshape(2, -1)[j, flat_idx], (lp[j] - lm[j]) / (2 * h))


def test_check_labels_rejects_out_of_range():
    with pytest.raises(InvalidLabelError):
        check_labels(np.array([0, 3]), 3)
    with pytest.raises(InvalidLabelError):
        check_labels(np.array([-1]), 3)
    np.testing.assert_array_equal(check_labels(2, 3), [2])


# ---------- Tests: parameters ----------

def test_update_delta_round_trips_between_snapshots():
    a = make_net(seed=0)
    b = make_net(seed=1)
    delta = UpdateDelta.between(a, b)
    moved = a.apply_delta(delta)
    for p, q in zip(moved.flat_parameters(), b.flat_parameters()):
        np.testing.assert_allclose(p, q, atol=1e-15)


def test_update_delta_layout_mismatch_raises():
    fc = make_net("fc")
    lin = make_net("linear")
    with pytest.raises(ArchitectureMismatchError):
        fc.apply_delta(UpdateDelta.zeros(lin))
    with pytest.raises(ArchitectureMismatchError):
        UpdateDelta.zeros(fc) + UpdateDelta.zeros(lin)
    with pytest.raises(ArchitectureMismatchError):
        UpdateDelta.between(fc, lin)


def test_with_flat_leaves_original_untouched():
    net = make_net()
    before = [v.copy() for v in net.flat_parameters()]
    net.with_flat([np.zeros_like(v) for v in before])
    for p, q in zip(net.flat_parameters(), before):
        np.testing.assert_array_equal(p, q)


def test_from_description_rebuilds_same_architecture():
    net = make_net("cnn4")
    clone = Network.from_description(net.describe())
    net.check_same_architecture(clone)
    assert clone.num_parameters == net.num_parameters
    assert all(not v.any() for v in clone.flat_parameters())


# ---------- Tests: init ----------

def test_init_is_deterministic_in_seed():
    a, b, c = make_net(seed=5), make_net(seed=5), make_net(seed=6)
    for p, q in zip(a.flat_parameters(), b.flat_parameters()):
        np.testing.assert_array_equal(p, q)
    assert any(not np.array_equal(p, q) for p, q in zip(a.flat_parameters(), c.flat_parameters()))


def test_shi_init_scale_and_zero_bias():
    net = init(build_architecture("fc", (1, 16, 16), 10), "shi", seed=0)
    first = net.param_layers[0]
    expected = np.sqrt(2 * np.pi) / first.fan_in
    assert first.weight.std() == pytest.approx(expected, rel=0.05)
    assert not first.bias.any()


def test_kaiming_init_is_wider_than_shi():
    shape = (1, 16, 16)
    shi = init(build_architecture("fc", shape, 10), "shi", seed=0)
    kai = init(build_architecture("fc", shape, 10), "kaiming", seed=0)
    assert kai.param_layers[0].weight.std() > shi.param_layers[0].weight.std()


def test_init_unknown_scheme_raises():
    with pytest.raises(ValueError):
        init(build_architecture("fc", (1, 8, 8), 3), "xavier")


def test_unknown_architecture_raises():
    with pytest.raises(ValueError):
        build_architecture("resnet", (1, 8, 8), 3)
