from __future__ import annotations

import math

import numpy as np
import pytest

from attacks import AttackConfig
from conftest import affine_net
from data_io import split, synth_blobs
from errors import ConfigError, NonFiniteLossError
from losses import LossSpec
from network import mlp
from training import (
    RAMP_KNEE,
    RAMP_KNEE_VALUE,
    SWEEP_HEADER,
    Adam,
    EpochMetrics,
    EvalConfig,
    SGD,
    TrainPlan,
    clip_gradients,
    co_probe,
    evaluate,
    get_optimizer,
    learning_rate,
    metrics_csv,
    read_metrics,
    schedule_state,
    scheduled_spec,
    smoothed_ramp,
    sweep_csv,
    toy_sweep,
    train,
    write_metrics,
)

FAST_EVAL = EvalConfig(steps=2, restarts=1)


def _data(k=3):
    return split(synth_blobs(k, 20, 2, seed=0), 0.25, seed=0)


def _net(k=3):
    return mlp((2,), [8], k, seed=0)


def _plan(**kwargs):
    return TrainPlan(**{"epochs": 2, "batch_size": 16, **kwargs})


# -----------------------------
# Smoothed ramp
# -----------------------------
def test_ramp_endpoints_and_knee():
    assert smoothed_ramp(0.0) <= 1e-3
    assert smoothed_ramp(1.0) == 1.0
    assert RAMP_KNEE_VALUE == pytest.approx(0.1013, abs=1e-4)
    assert smoothed_ramp(RAMP_KNEE) == pytest.approx(RAMP_KNEE_VALUE, rel=1e-12)


def test_ramp_is_nondecreasing_and_bounded():
    values = [smoothed_ramp(t) for t in np.linspace(0.0, 1.0, 1001)]
    assert all(0.0 <= v <= 1.0 for v in values)
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_ramp_slope_is_continuous_at_knee():
    h = 1e-6
    left = (smoothed_ramp(RAMP_KNEE) - smoothed_ramp(RAMP_KNEE - h)) / h
    right = (smoothed_ramp(RAMP_KNEE + h) - smoothed_ramp(RAMP_KNEE)) / h
    assert left == pytest.approx(right, rel=1e-3)


def test_ramp_clamps_outside_unit_interval():
    assert smoothed_ramp(-1.0) == smoothed_ramp(0.0)
    assert smoothed_ramp(2.0) == 1.0


# -----------------------------
# Learning-rate schedules
# -----------------------------
def test_cyclic_learning_rate():
    plan = TrainPlan(epochs=10).resolve()
    assert plan.optimizer == "sgd" and plan.grad_clip is None
    assert learning_rate(plan, 0.0) == 0.0
    assert learning_rate(plan, 5.0) == pytest.approx(0.2)
    assert learning_rate(plan, 10.0) == 0.0
    assert learning_rate(plan, 2.5) == pytest.approx(0.1)
    assert learning_rate(plan, 7.5) == pytest.approx(0.1)


def test_long_schedule_defaults_and_decays():
    plan = TrainPlan(schedule="long", epochs=8).resolve()
    assert plan.optimizer == "adam"
    assert plan.grad_clip == 10.0
    assert plan.lr_decay_epochs == [6.0, 7.0]
    assert plan.eps_ramp_epochs == 4.0
    assert learning_rate(plan, 0.0) == pytest.approx(5e-4)
    assert learning_rate(plan, 5.9) == pytest.approx(5e-4)
    assert learning_rate(plan, 6.0) == pytest.approx(1e-4)
    assert learning_rate(plan, 7.5) == pytest.approx(2e-5)


def test_resolve_keeps_explicit_settings():
    plan = TrainPlan(schedule="long", epochs=8, optimizer="sgd", lr_peak=0.01, grad_clip=1.0).resolve()
    assert (plan.optimizer, plan.lr_peak, plan.grad_clip) == ("sgd", 0.01, 1.0)


@pytest.mark.parametrize(
    "kwargs,field",
    [
        ({"schedule": "onecycle"}, "train.schedule"),
        ({"epochs": -1}, "train.epochs"),
        ({"batch_size": 0}, "train.batch_size"),
        ({"optimizer": "rmsprop"}, "train.optimizer"),
        ({"momentum": 1.0}, "train.momentum"),
        ({"grad_clip": 0.0}, "train.grad_clip"),
    ],
)
def test_plan_validation(kwargs, field):
    with pytest.raises(ConfigError, match=field):
        TrainPlan(**kwargs).validate()


# -----------------------------
# Radius and coefficient schedules
# -----------------------------
def test_bounding_radius_ramps_to_target():
    plan = TrainPlan(schedule="long", epochs=8).resolve()
    spec = LossSpec("exp-ibp", alpha=0.1, attack=AttackConfig(eps=0.1))
    radii = [schedule_state(plan, spec, step, 10).bounding_eps for step in range(81)]
    assert radii[0] <= 1e-3 * 0.1
    assert radii[40] == 0.1
    assert radii[-1] == 0.1
    assert all(b >= a for a, b in zip(radii, radii[1:]))


def test_long_schedule_ramps_attack_radius_with_bounding_radius():
    plan = TrainPlan(schedule="long", epochs=8).resolve("mtl-ibp")
    assert plan.attack_eps_ramp_epochs == plan.eps_ramp_epochs == 4.0
    spec = LossSpec("mtl-ibp", attack=AttackConfig(kind="pgd", eps=0.1))
    states = [schedule_state(plan, spec, step, 10) for step in range(81)]
    assert states[0].attack_eps < 0.1 * 1e-3
    assert states[10].attack_eps < 0.1
    for s in states:
        assert s.attack_eps == pytest.approx(s.bounding_eps, rel=1e-12, abs=1e-15)
    assert states[40].attack_eps == 0.1
    assert scheduled_spec(spec, states[5]).attack.eps == states[5].attack_eps


def test_cyclic_ramps_follow_the_loss_family():
    for family in ("mtl-ibp", "forwabs"):
        plan = TrainPlan(epochs=30).resolve(family)
        assert plan.coef_ramp_epochs == pytest.approx(25.0)
        assert plan.eps_ramp_epochs == pytest.approx(25.0)
        assert plan.attack_eps_ramp_epochs == 0.0
    for family in ("adversarial", "ibp", "exp-ibp", "cc-ibp", "sabr", None):
        plan = TrainPlan(epochs=30).resolve(family)
        assert plan.coef_ramp_epochs == 0.0 and plan.eps_ramp_epochs == 0.0
    spec = LossSpec("forwabs", lam=0.2, attack=AttackConfig(kind="n-fgsm", eps=0.1))
    early = schedule_state(TrainPlan(epochs=30).resolve("forwabs"), spec, 10, 10)
    assert early.attack_eps == 0.1
    assert early.bounding_eps < 0.1 and early.coef_fraction < 1.0


def test_resolve_keeps_explicit_ramps():
    plan = TrainPlan(epochs=30, coef_ramp_epochs=0.0, eps_ramp_epochs=3.0).resolve("mtl-ibp")
    assert (plan.coef_ramp_epochs, plan.eps_ramp_epochs) == (0.0, 3.0)
    long = TrainPlan(schedule="long", epochs=8, attack_eps_ramp_epochs=0.0).resolve()
    assert long.attack_eps_ramp_epochs == 0.0 and long.eps_ramp_epochs == 4.0
    assert long.resolve() == long


def test_cyclic_schedule_bounds_at_full_radius():
    plan = TrainPlan(epochs=4).resolve()
    spec = LossSpec("ibp", attack=AttackConfig(eps=0.2))
    assert schedule_state(plan, spec, 0, 5).bounding_eps == 0.2


def test_eps_target_overrides_loss_radius():
    plan = TrainPlan(epochs=4, eps_target=0.3).resolve()
    spec = LossSpec("ibp", attack=AttackConfig(eps=0.2))
    assert schedule_state(plan, spec, 3, 5).bounding_eps == 0.3


def test_coefficient_ramp_scales_alpha_and_lambda_but_not_exp_alpha():
    plan = TrainPlan(epochs=8, coef_ramp_epochs=4).resolve()
    state = schedule_state(plan, LossSpec("mtl-ibp"), 20, 10)
    fraction = smoothed_ramp(0.5)
    assert state.coef_fraction == pytest.approx(fraction)
    assert scheduled_spec(LossSpec("mtl-ibp", alpha=0.4), state).alpha == pytest.approx(0.4 * fraction)
    assert scheduled_spec(LossSpec("forwabs", lam=0.2), state).lam == pytest.approx(0.2 * fraction)
    assert scheduled_spec(LossSpec("exp-ibp", alpha=0.4), state).alpha == 0.4


def test_attack_radius_ramp():
    plan = TrainPlan(epochs=8, attack_eps_ramp_epochs=2).resolve()
    spec = LossSpec("adversarial", attack=AttackConfig(kind="fgsm", eps=0.3))
    assert schedule_state(plan, spec, 5, 10).attack_eps == pytest.approx(0.075)
    state = schedule_state(plan, spec, 30, 10)
    assert scheduled_spec(spec, state).attack.eps == pytest.approx(0.3)
    assert spec.attack.eps == 0.3


# -----------------------------
# Optimizers
# -----------------------------
def test_clip_gradients():
    grads = {"a": np.array([3.0, 4.0])}
    clipped, norm = clip_gradients(grads, 1.0)
    assert norm == 5.0
    assert np.linalg.norm(clipped["a"]) == pytest.approx(1.0)
    same, _ = clip_gradients(grads, None)
    assert same is grads


def test_sgd_first_step():
    opt = SGD(momentum=0.9, weight_decay=0.1)
    out = opt.step({"w": np.array([1.0, -2.0])}, {"w": np.array([0.5, 0.5])}, lr=0.1)
    assert np.allclose(out["w"], [1.0 - 0.1 * 0.6, -2.0 - 0.1 * 0.3])


def test_adam_first_step_moves_by_lr():
    out = Adam().step({"w": np.array([1.0, 1.0])}, {"w": np.array([2.0, -0.5])}, lr=0.01)
    assert np.allclose(out["w"], [0.99, 1.01], atol=1e-8)


def test_get_optimizer():
    assert isinstance(get_optimizer(TrainPlan(schedule="long").resolve()), Adam)
    assert isinstance(get_optimizer(TrainPlan().resolve()), SGD)


# -----------------------------
# Metrics files
# -----------------------------
def test_metrics_round_trip(tmp_path):
    history = [
        EpochMetrics(epoch=1, clean_acc=0.5, pgd_acc=0.25, ibp_cert_acc=0.125, ibp_loss=1.0 / 3.0, lr=0.2, eps_bound=0.1),
        EpochMetrics(epoch=2, clean_acc=0.75, attack_train_acc=0.8, wall_ms=12),
    ]
    path = str(tmp_path / "metrics.csv")
    write_metrics(path, history)
    loaded = read_metrics(path)
    assert len(loaded) == 2
    assert loaded[0].ibp_loss == 1.0 / 3.0
    assert math.isnan(loaded[0].attack_train_acc)
    assert loaded[1].wall_ms == 12 and loaded[1].epoch == 2
    assert metrics_csv(loaded) == metrics_csv(history)


def test_metrics_header():
    assert metrics_csv([]).splitlines()[0] == (
        "epoch,clean_acc,attack_train_acc,pgd_acc,ibp_cert_acc,ibp_loss,forwabs_gap,lr,eps_bound,wall_ms"
    )


# -----------------------------
# Evaluation
# -----------------------------
def test_evaluate_at_zero_radius():
    data = _data()
    x, y = data.part("val")
    metrics = evaluate(_net(), x, y, 0.0, FAST_EVAL.attack_config(0.0), rng=np.random.default_rng(0))
    assert metrics.pgd_acc == metrics.clean_acc
    assert metrics.ibp_cert_acc == metrics.clean_acc


def test_evaluate_orders_accuracies():
    data = _data()
    x, y = data.part("train")
    metrics = evaluate(_net(), x, y, 0.1, EvalConfig(steps=5, restarts=2).attack_config(0.1), rng=np.random.default_rng(0))
    assert metrics.ibp_cert_acc <= metrics.pgd_acc <= metrics.clean_acc
    assert metrics.forwabs_gap > 0


def test_evaluate_empty_split():
    metrics = evaluate(_net(), np.zeros((0, 2)), np.zeros(0, dtype=np.int64), 0.1)
    assert metrics.clean_acc == 0.0 and metrics.eps_bound == 0.1


# -----------------------------
# Training loop
# -----------------------------
def test_zero_epochs_leaves_network_unchanged():
    net = _net()
    trained, history = train(net, _data(), _plan(epochs=0), LossSpec("ibp", attack=AttackConfig(eps=0.05)), eval_cfg=FAST_EVAL)
    assert history == []
    for name, p in net.params.items():
        assert np.array_equal(trained.params[name].data, p.data)


def test_training_is_deterministic():
    spec = LossSpec("mtl-ibp", alpha=0.5, attack=AttackConfig(kind="rs-fgsm", eps=0.05))
    runs = [train(_net(), _data(), _plan(seed=3), spec, eval_cfg=FAST_EVAL) for _ in range(2)]
    assert metrics_csv(runs[0][1]) == metrics_csv(runs[1][1])
    for name, p in runs[0][0].params.items():
        assert np.array_equal(runs[1][0].params[name].data, p.data)


def test_training_records_one_row_per_epoch():
    spec = LossSpec("forwabs", lam=0.01, attack=AttackConfig(kind="n-fgsm", eps=0.05))
    net, history = train(_net(), _data(), _plan(epochs=3), spec, eval_cfg=FAST_EVAL)
    assert [m.epoch for m in history] == [1, 2, 3]
    assert all(m.wall_ms == 0 for m in history)
    assert all(0.0 <= m.attack_train_acc <= 1.0 for m in history)
    assert history[-1].eps_bound == 0.05
    _, timed = train(_net(), _data(), _plan(epochs=1), spec, eval_cfg=FAST_EVAL, record_wall_time=True)
    assert timed[0].wall_ms >= 0


def test_ibp_training_has_no_attack_accuracy():
    _, history = train(_net(), _data(), _plan(epochs=1), LossSpec("ibp", attack=AttackConfig(eps=0.05)), eval_cfg=FAST_EVAL)
    assert math.isnan(history[0].attack_train_acc)


def test_forwabs_with_zero_lambda_trains_like_adversarial():
    cfg = AttackConfig(kind="fgsm", eps=0.05)
    # no radius ramp, so both runs record the same eps_bound
    a_net, a_hist = train(_net(), _data(), _plan(eps_ramp_epochs=0.0), LossSpec("forwabs", lam=0.0, attack=cfg), eval_cfg=FAST_EVAL)
    b_net, b_hist = train(_net(), _data(), _plan(), LossSpec("adversarial", attack=cfg), eval_cfg=FAST_EVAL)
    assert metrics_csv(a_hist) == metrics_csv(b_hist)
    for name, p in a_net.params.items():
        assert np.array_equal(b_net.params[name].data, p.data)


def test_mtl_and_exp_agree_at_alpha_one():
    cfg = AttackConfig(kind="pgd", eps=0.05, steps=2)
    a_net, _ = train(_net(), _data(), _plan(coef_ramp_epochs=0.0, eps_ramp_epochs=0.0), LossSpec("mtl-ibp", alpha=1.0, attack=cfg), eval_cfg=FAST_EVAL)
    b_net, _ = train(_net(), _data(), _plan(), LossSpec("exp-ibp", alpha=1.0, attack=cfg), eval_cfg=FAST_EVAL)
    for name, p in a_net.params.items():
        assert np.array_equal(b_net.params[name].data, p.data)


def test_long_schedule_runs():
    spec = LossSpec("exp-ibp", alpha=0.1, attack=AttackConfig(kind="pgd", eps=0.05, steps=2))
    _, history = train(_net(), _data(), _plan(schedule="long", epochs=2), spec, eval_cfg=FAST_EVAL)
    assert history[0].lr == pytest.approx(5e-4)
    assert history[0].eps_bound < history[1].eps_bound <= 0.05


def test_non_finite_loss_stops_training():
    huge = np.full((2, 2), 1e200)
    net = affine_net([huge, huge], [np.zeros(2), np.zeros(2)])
    spec = LossSpec("adversarial", attack=AttackConfig(kind="fgsm", eps=0.05))
    with np.errstate(all="ignore"), pytest.raises(NonFiniteLossError) as info:
        train(net, _data(k=2), _plan(epochs=1), spec, eval_cfg=FAST_EVAL)
    assert info.value.batch_index == 0 and info.value.epoch == 1
    assert "epoch 1 batch 0" in str(info.value)
    assert "adversarial" in info.value.components


# -----------------------------
# Catastrophic-overfitting detection
# -----------------------------
def _history(pgd, attacked):
    return [EpochMetrics(epoch=i + 1, pgd_acc=p, attack_train_acc=a) for i, (p, a) in enumerate(zip(pgd, attacked))]


COLLAPSE = _history(
    [0.70, 0.68, 0.66, 0.64, 0.60, 0.02, 0.01, 0.01, 0.00, 0.00],
    [0.75, 0.78, 0.80, 0.82, 0.85, 0.93, 0.94, 0.95, 0.95, 0.95],
)


def test_co_probe_flags_collapse():
    verdict = co_probe(COLLAPSE)
    assert verdict.flagged and verdict.onset_epoch == 6


def test_co_probe_window_keeps_onset_close():
    verdict = co_probe(COLLAPSE, window=3)
    assert verdict.flagged and abs(verdict.onset_epoch - 6) <= 1


def test_co_probe_thresholds_are_configurable():
    assert co_probe(COLLAPSE, pgd_threshold=0.001).onset_epoch == 9
    assert not co_probe(COLLAPSE, attack_threshold=0.99).flagged


def test_co_probe_rising_accuracy_is_not_flagged():
    rising = _history([0.1 * i for i in range(1, 8)], [0.1 * i + 0.05 for i in range(1, 8)])
    assert not co_probe(rising).flagged
    assert not co_probe([]).flagged


def test_co_probe_ignores_missing_attack_accuracy():
    assert not co_probe(_history([0.0, 0.0], [float("nan"), float("nan")])).flagged


# -----------------------------
# Toy sweep
# -----------------------------
DEPTHS = [2, 6, 10, 14, 18]
WS = [0.0, 0.25, 0.5, 0.75, 1.0]
ADV = math.log(1.0 + math.exp(2.0))


@pytest.fixture(scope="module")
def sweep():
    return toy_sweep(DEPTHS, WS, {"mtl-ibp": [0.01], "exp-ibp": [0.1], "cc-ibp": [0.01], "sabr": [0.01], "forwabs": [0.01]})


def _row(rows, family, depth, w):
    return next(r for r in rows if r.family == family and r.depth == depth and r.w == w)


def test_sweep_shape(sweep):
    assert len(sweep) == len(DEPTHS) * len(WS) * 5
    lines = sweep_csv(sweep).splitlines()
    assert lines[0] == ",".join(SWEEP_HEADER)
    assert len(lines) == len(sweep) + 1


def test_sweep_adversarial_component_is_constant(sweep):
    for r in sweep:
        assert r.adversarial == pytest.approx(ADV, rel=1e-12)


def test_sweep_w_zero_is_depth_independent(sweep):
    for family in ("mtl-ibp", "exp-ibp", "cc-ibp", "sabr", "forwabs"):
        for depth in DEPTHS:
            assert _row(sweep, family, depth, 0.0).loss == pytest.approx(ADV, rel=1e-12)


def test_sweep_ibp_loss_values(sweep):
    deep = _row(sweep, "mtl-ibp", 18, 1.0)
    assert deep.ibp == pytest.approx(1310722.0, rel=1e-12)
    assert deep.loss == pytest.approx(0.99 * ADV + 0.01 * 1310722.0, rel=1e-9)
    assert deep.loss > 10 * _row(sweep, "mtl-ibp", 18, 0.0).loss


def test_sweep_ibp_component_grows_with_depth_and_w(sweep):
    for depth in DEPTHS:
        values = [_row(sweep, "mtl-ibp", depth, w).ibp for w in WS]
        assert all(b >= a for a, b in zip(values, values[1:]))
    for w in WS:
        values = [_row(sweep, "mtl-ibp", depth, w).ibp for depth in DEPTHS]
        assert all(b >= a for a, b in zip(values, values[1:]))


def test_sweep_exp_ibp_stays_small(sweep):
    for w in WS:
        assert _row(sweep, "exp-ibp", 18, w).loss < 10.0


def test_sweep_rejects_negative_w():
    with pytest.raises(ConfigError):
        toy_sweep([2], [-1.0], {"mtl-ibp": [0.1]})


def test_sweep_forwabs_takes_lambda_above_one():
    rows = toy_sweep([2, 6], [0.0, 0.5], {"forwabs": [5.0], "mtl-ibp": [0.5]})
    for r in rows:
        if r.family == "forwabs":
            assert r.coefficient == 5.0
            assert r.loss == pytest.approx(ADV + 5.0 * r.forwabs, rel=1e-12)
        else:
            assert r.forwabs is None
    assert _row(rows, "forwabs", 6, 0.5).forwabs > _row(rows, "forwabs", 6, 0.0).forwabs


def test_sweep_rejects_alpha_above_one():
    with pytest.raises(ConfigError, match="alpha"):
        toy_sweep([2], [0.5], {"mtl-ibp": [5.0]})
