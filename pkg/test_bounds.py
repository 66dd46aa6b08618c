from __future__ import annotations

import numpy as np
import pytest

from attacks import AttackConfig, attack
from bounds import elide_last_layer, forwabs_gap, ibp_bounds, ibp_certified, min_margin
from conftest import affine_net, check_gradient, random_net
from errors import ConfigError, NonFiniteBoundError
from network import build_preset, forward, logit_differences, predict
from tensor import Tape, backward, mean


# 2-5 affine layers, widths up to 32
WIDE = {"max_width": 32, "max_hidden": 4}


def _inputs(seed, n=4, d=3):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1.0, 1.0, size=(n, d)), rng.integers(0, 3, size=n)


# -----------------------------
# Interval bounds
# -----------------------------
def test_single_affine_layer_example():
    net = affine_net([np.array([[1.0]])], [np.array([0.0])])
    state = ibp_bounds(net, np.array([0.0]), 0, 1.0)
    assert state.lower[-1].data.tolist() == [[-1.0]]
    assert state.upper[-1].data.tolist() == [[1.0]]
    assert state.bn_statistics == "none"


@pytest.mark.parametrize("seed", range(5))
def test_zero_radius_gives_exact_logit_differences(seed):
    net = random_net(seed)
    x, y = _inputs(seed)
    state = ibp_bounds(net, x, y, 0.0)
    assert np.allclose(state.logit_lower.data, logit_differences(forward(net, x), y).data, atol=1e-9)


@pytest.mark.parametrize("seed", range(200))
def test_bounds_are_sound_under_sampling(seed):
    net = random_net(seed, **WIDE)
    rng = np.random.default_rng(1000 + seed)
    x = rng.uniform(-1.0, 1.0, size=3)
    y = int(rng.integers(0, 3))
    eps = 0.1
    lower = ibp_bounds(net, x, y, eps).logit_lower.data[0]
    samples = x + rng.uniform(-eps, eps, size=(100, 3))
    z = logit_differences(forward(net, samples), np.full(100, y)).data
    assert np.all(z >= lower - 1e-9 * np.maximum(1.0, np.abs(lower)))


def test_bounds_ordered_at_every_layer():
    net = random_net(11, hidden=[6, 5])
    x, y = _inputs(11)
    state = ibp_bounds(net, x, y, 0.2)
    assert len(state.lower) == 3
    for lo, hi in zip(state.lower, state.upper):
        assert np.all(lo.data <= hi.data)


def test_bounds_widen_with_radius():
    net = random_net(12)
    x, y = _inputs(12)
    small = ibp_bounds(net, x, y, 0.05).logit_lower.data
    large = ibp_bounds(net, x, y, 0.1).logit_lower.data
    assert np.all(large <= small + 1e-12)


def test_label_column_is_zero():
    net = random_net(13)
    x, y = _inputs(13)
    lower = ibp_bounds(net, x, y, 0.3).logit_lower.data
    assert np.all(lower[np.arange(len(y)), y] == 0.0)


def test_clip_input_tightens_bounds():
    net = random_net(14)
    x = np.array([[0.0, 0.5, 1.0]])
    plain = ibp_bounds(net, x, 0, 0.3).logit_lower.data
    clipped = ibp_bounds(net, x, 0, 0.3, clip_input=True).logit_lower.data
    assert np.all(clipped >= plain - 1e-12)


def test_batchnorm_statistics_reported():
    net = build_preset("cnn5-thin", 3, (1, 8, 8), seed=0)
    x = np.random.default_rng(0).uniform(size=(2, 1, 8, 8))
    assert ibp_bounds(net, x, [0, 1], 0.01).bn_statistics == "running"
    record = {}
    forward(net, x, "train", record=record, update_running=False)
    assert ibp_bounds(net, x, [0, 1], 0.01, bn_stats=record).bn_statistics == "batch"


def test_negative_radius_rejected():
    with pytest.raises(ConfigError, match="eps: eps must be >= 0") as info:
        ibp_bounds(random_net(0), np.zeros(3), 0, -0.1)
    assert info.value.exit_code == 1
    with pytest.raises(ConfigError):
        forwabs_gap(random_net(0), -0.1)


def test_overflow_raises_non_finite_bound():
    huge = np.full((2, 2), 1e200)
    net = affine_net([huge, huge], [np.zeros(2), np.zeros(2)])
    with np.errstate(all="ignore"), pytest.raises(NonFiniteBoundError):
        ibp_bounds(net, np.ones(2), 0, 0.1)


# -----------------------------
# Last-layer elision
# -----------------------------
def test_elision_example():
    net = affine_net([np.eye(2)], [np.zeros(2)])
    w_tilde, b_tilde = elide_last_layer(net, 1)
    assert w_tilde.data.tolist() == [[-1.0, 1.0], [0.0, 0.0]]
    assert b_tilde.data.tolist() == [0.0, 0.0]


@pytest.mark.parametrize("seed", range(10))
def test_elided_bounds_dominate_naive_subtraction(seed):
    net = random_net(seed)
    x, y = _inputs(seed)
    state = ibp_bounds(net, x, y, 0.1)
    lo, hi = state.lower[-1].data, state.upper[-1].data
    rows = np.arange(len(y))
    naive = lo[rows, y][:, None] - hi
    assert np.all(state.logit_lower.data >= naive - 1e-9)


# -----------------------------
# Certification
# -----------------------------
def test_certified_at_zero_radius_iff_correct():
    net = random_net(21)
    x, _ = _inputs(21, n=8)
    pred = predict(net, x)
    assert np.all(ibp_certified(net, x, pred, 0.0))
    wrong = (pred + 1) % 3
    assert not np.any(ibp_certified(net, x, wrong, 0.0))


def test_certification_is_monotone_in_radius():
    net = random_net(22)
    x, _ = _inputs(22, n=16)
    y = predict(net, x)
    for large, small in [(0.2, 0.1), (0.1, 0.05), (0.05, 0.0)]:
        cert_large = ibp_certified(net, x, y, large)
        cert_small = ibp_certified(net, x, y, small)
        assert np.all(cert_small[cert_large])


def test_pgd_never_flips_a_certified_prediction():
    eps = 0.02
    cfg = AttackConfig(kind="pgd", eps=eps, steps=50, restarts=1)
    certified_total = 0
    for seed in range(20):
        net = random_net(300 + seed, hidden=[8, 8])
        x = np.random.default_rng(seed).uniform(0.0, 1.0, size=(32, 3))
        y = predict(net, x)
        certified = ibp_certified(net, x, y, eps)
        x_adv = attack(net, x, y, cfg, rng=np.random.default_rng(seed)).x_adv
        assert np.abs(x_adv - x).max() <= eps + 1e-12
        assert np.array_equal(predict(net, x_adv)[certified], y[certified])
        certified_total += int(certified.sum())
    assert certified_total > 0


def test_min_margin_skips_label():
    net = random_net(23)
    x, y = _inputs(23)
    state = ibp_bounds(net, x, y, 0.1)
    lower = state.logit_lower.data.copy()
    lower[np.arange(len(y)), y] = np.inf
    assert np.array_equal(min_margin(state, y), lower.min(axis=1))


# -----------------------------
# Gradients through the bounds
# -----------------------------
@pytest.mark.parametrize("seed", range(3))
def test_bound_gradients_match_finite_differences(seed):
    net = random_net(seed, hidden=[5, 4])
    x, y = _inputs(seed)
    eps = 0.1
    tape = Tape()
    view = net.on(tape)
    grads = view.gradients(backward(tape, mean(ibp_bounds(view, x, y, eps).logit_lower)))
    for name, p in net.params.items():
        def f(v, name=name):
            return float(ibp_bounds(net.with_params({name: v}), x, y, eps).logit_lower.data.mean())

        check_gradient(f, p.data, grads[name])


# -----------------------------
# ForwAbs gap
# -----------------------------
def test_forwabs_hand_example():
    net = affine_net([np.array([[1.0, -1.0]]), np.array([[2.0]])], [np.zeros(1), np.zeros(1)])
    gap = forwabs_gap(net, 0.1)
    assert np.allclose(gap.deltas[0].data, [0.4])
    assert np.allclose(gap.deltas[1].data, [0.8])
    assert gap.total.item() == pytest.approx(0.8)


def test_forwabs_zero_radius():
    gap = forwabs_gap(random_net(3), 0.0)
    assert gap.total.item() == 0.0


@pytest.mark.parametrize("seed", range(100))
def test_forwabs_equals_ibp_width_on_deep_linear_networks(seed):
    net = random_net(seed, activation=False, **WIDE)
    x, y = _inputs(seed)
    eps = 0.1
    width = (ibp_bounds(net, x, y, eps).upper[-1].data - ibp_bounds(net, x, y, eps).lower[-1].data)
    gap = forwabs_gap(net, eps).deltas[-1].data
    for row in width:
        assert np.allclose(row, gap, rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("seed", range(100))
def test_forwabs_dominates_ibp_width_with_relu(seed):
    net = random_net(seed, **WIDE)
    x, y = _inputs(seed)
    state = ibp_bounds(net, x, y, 0.1)
    gap = forwabs_gap(net, 0.1).deltas[-1].data
    assert np.all(gap >= state.upper[-1].data - state.lower[-1].data - 1e-9 * max(1.0, gap.max()))


def test_forwabs_batchnorm_scales_gap():
    net = build_preset("cnn5-thin", 3, (1, 8, 8), seed=0)
    gap = forwabs_gap(net, 0.01)
    assert len(gap.deltas) == 9
    assert gap.deltas[0].shape == (16, 8, 8)
    assert np.all(np.isfinite(gap.deltas[-1].data))


def test_forwabs_gradient_matches_finite_differences():
    net = random_net(4, hidden=[4])
    tape = Tape()
    view = net.on(tape)
    grads = view.gradients(backward(tape, forwabs_gap(view, 0.05).total))
    for name, p in net.params.items():
        def f(v, name=name):
            return forwabs_gap(net.with_params({name: v}), 0.05).total.item()

        check_gradient(f, p.data, grads[name])
