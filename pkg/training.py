"""
Training loop, optimizers, schedules, evaluation metrics, the
catastrophic-overfitting detector and the toy-network loss sweep.

Two schedule regimes:
  cyclic -- SGD (momentum 0.9, weight decay 5e-4), lr rising linearly from 0
            to lr_peak over the first `cyclic_peak_fraction` of training and
            back to 0 at the end; no gradient clipping. mtl-ibp and forwabs
            ramp their coefficient and bounding radius over 25/30 of training.
  long   -- Adam (lr 5e-4) decayed by 0.2 at 75% and 87.5% of the epochs,
            gradient l2 norm capped at 10; the bounding and attack radii
            both follow the smoothed ramp over the first half of training.

Usage example:
  net, history = train(net, data, TrainPlan(epochs=2), LossSpec("forwabs", lam=0.1))
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from attacks import AttackConfig, attack
from bounds import forwabs_gap, ibp_bounds, min_margin
from data_io import Dataset, derive_rng
from errors import ConfigError, NonFiniteLossError
from losses import EXPRESSIVE, LossSpec, compute_loss
from network import Network, _atomic_write, forward, toy_network
from tensor import Tape, backward, cross_entropy, neg

logger = logging.getLogger(__name__)

SCHEDULES = ("cyclic", "long")
OPTIMIZERS = ("sgd", "adam")

# exponential part of the ramp doubles K times over [0, RAMP_KNEE]
RAMP_KNEE = 0.25
RAMP_DOUBLINGS = 4
# cyclic runs ramp the coefficient and bounding radius of these families over 25/30 of training
CYCLIC_RAMPED = ("mtl-ibp", "forwabs")


# -----------------------------
# Plans and schedules
# -----------------------------
@dataclass
class TrainPlan:
    """How to train. Fields left as None take the schedule's defaults in `resolve()`.

    Attributes:
        schedule: "cyclic" or "long".
        epochs: number of passes over the training split.
        batch_size: samples per step.
        optimizer: "sgd" or "adam" (cyclic -> sgd, long -> adam).
        lr_peak: cyclic peak / long initial learning rate (0.2 / 5e-4).
        momentum, weight_decay: SGD settings.
        grad_clip: cap on the global l2 gradient norm (long -> 10, cyclic -> none).
        cyclic_peak_fraction: where the cyclic lr peaks, as a fraction of training.
        lr_decay_epochs: long schedule decay epochs (75% and 87.5% of epochs).
        lr_decay_factor: multiplicative decay at each decay epoch.
        eps_target: final bounding radius; None uses the loss spec's radius.
        eps_ramp_epochs: epochs to ramp the bounding radius from 0 (long -> epochs / 2,
            cyclic mtl-ibp and forwabs -> 25/30 of epochs, else 0).
        coef_ramp_epochs: epochs to ramp alpha (mtl-ibp, cc-ibp, sabr) or lambda (forwabs)
            (cyclic mtl-ibp and forwabs -> 25/30 of epochs, else 0).
        attack_eps_ramp_epochs: epochs to ramp the attack radius from 0 (long -> eps_ramp_epochs,
            along the smoothed ramp; cyclic -> 0, linear when set).
        seed: shuffling and attack randomness.
    """

    schedule: str = "cyclic"
    epochs: int = 10
    batch_size: int = 128
    optimizer: Optional[str] = None
    lr_peak: Optional[float] = None
    momentum: float = 0.9
    weight_decay: float = 5e-4
    grad_clip: Optional[float] = None
    cyclic_peak_fraction: float = 0.5
    lr_decay_epochs: Optional[List[float]] = None
    lr_decay_factor: float = 0.2
    eps_target: Optional[float] = None
    eps_ramp_epochs: Optional[float] = None
    coef_ramp_epochs: Optional[float] = None
    attack_eps_ramp_epochs: Optional[float] = None
    seed: int = 0

    def resolve(self, family: Optional[str] = None) -> "TrainPlan":
        """Copy with every schedule-dependent default filled in.

        `family` is the loss family being trained; on the cyclic schedule it
        decides whether the coefficient and bounding radius are ramped.
        """
        long = self.schedule == "long"
        cyclic_ramp = 25.0 * self.epochs / 30.0 if not long and family in CYCLIC_RAMPED else 0.0
        eps_ramp = self.eps_ramp_epochs
        if eps_ramp is None:
            eps_ramp = self.epochs / 2.0 if long else cyclic_ramp
        return replace(
            self,
            optimizer=self.optimizer or ("adam" if long else "sgd"),
            lr_peak=self.lr_peak if self.lr_peak is not None else (5e-4 if long else 0.2),
            grad_clip=self.grad_clip if self.grad_clip is not None or not long else 10.0,
            lr_decay_epochs=(
                list(self.lr_decay_epochs)
                if self.lr_decay_epochs is not None
                else ([0.75 * self.epochs, 0.875 * self.epochs] if long else [])
            ),
            eps_ramp_epochs=eps_ramp,
            coef_ramp_epochs=self.coef_ramp_epochs if self.coef_ramp_epochs is not None else (0.0 if long else cyclic_ramp),
            attack_eps_ramp_epochs=(
                self.attack_eps_ramp_epochs if self.attack_eps_ramp_epochs is not None else (eps_ramp if long else 0.0)
            ),
        )

    def validate(self, prefix: str = "train") -> "TrainPlan":
        checks = [
            (self.schedule in SCHEDULES, "schedule", f"schedule must be one of {', '.join(SCHEDULES)}"),
            (self.epochs >= 0, "epochs", "epochs must be >= 0"),
            (self.batch_size >= 1, "batch_size", "batch_size must be >= 1"),
            (self.optimizer is None or self.optimizer in OPTIMIZERS, "optimizer", "optimizer must be sgd or adam"),
            (self.lr_peak is None or self.lr_peak >= 0, "lr_peak", "lr_peak must be >= 0"),
            (0.0 <= self.momentum < 1.0, "momentum", "momentum must be in [0,1)"),
            (self.weight_decay >= 0, "weight_decay", "weight_decay must be >= 0"),
            (self.grad_clip is None or self.grad_clip > 0, "grad_clip", "grad_clip must be > 0"),
            (0.0 < self.cyclic_peak_fraction < 1.0, "cyclic_peak_fraction", "cyclic_peak_fraction must be in (0,1)"),
            (self.lr_decay_factor > 0, "lr_decay_factor", "lr_decay_factor must be > 0"),
            (self.eps_target is None or self.eps_target >= 0, "eps_target", "eps_target must be >= 0"),
            (self.eps_ramp_epochs is None or self.eps_ramp_epochs >= 0, "eps_ramp_epochs", "eps_ramp_epochs must be >= 0"),
            (self.coef_ramp_epochs is None or self.coef_ramp_epochs >= 0, "coef_ramp_epochs", "coef_ramp_epochs must be >= 0"),
            (
                self.attack_eps_ramp_epochs is None or self.attack_eps_ramp_epochs >= 0,
                "attack_eps_ramp_epochs",
                "attack_eps_ramp_epochs must be >= 0",
            ),
        ]
        for ok, name, message in checks:
            if not ok:
                raise ConfigError(message, field=f"{prefix}.{name}")
        return self


@dataclass
class ScheduleState:
    step: int
    epoch: float
    lr: float
    bounding_eps: float
    coef_fraction: float
    attack_eps: float


def _ramp_knee_value() -> float:
    # value m at the knee that makes the exponential and linear slopes agree
    growth = 2.0 ** RAMP_DOUBLINGS
    exp_slope = math.log(2.0) * RAMP_DOUBLINGS / RAMP_KNEE * growth / (growth - 1.0)
    lin_slope = 1.0 / (1.0 - RAMP_KNEE)
    return lin_slope / (exp_slope + lin_slope)


RAMP_KNEE_VALUE = _ramp_knee_value()


def smoothed_ramp(t: float) -> float:
    """Exponential growth on [0, 0.25], linear on [0.25, 1]; f(0) = 0, f(1) = 1.

    f(t) = m (2^(4t/0.25) - 1) / (2^4 - 1) below the knee and
    m + (1 - m)(t - 0.25) / 0.75 above it, with m picked so that value and
    slope both match at the knee (m ~ 0.1013).
    """
    t = min(max(float(t), 0.0), 1.0)
    m = RAMP_KNEE_VALUE
    if t <= RAMP_KNEE:
        growth = 2.0 ** RAMP_DOUBLINGS
        return m * (2.0 ** (RAMP_DOUBLINGS * t / RAMP_KNEE) - 1.0) / (growth - 1.0)
    if t >= 1.0:
        return 1.0
    return m + (1.0 - m) * (t - RAMP_KNEE) / (1.0 - RAMP_KNEE)


def learning_rate(plan: TrainPlan, epoch: float) -> float:
    """lr at a (fractional) epoch of a resolved plan."""
    if plan.schedule == "cyclic":
        if plan.epochs == 0:
            return 0.0
        peak_at = plan.cyclic_peak_fraction * plan.epochs
        return float(np.interp(epoch, [0.0, peak_at, plan.epochs], [0.0, plan.lr_peak, 0.0]))
    decays = sum(1 for e in plan.lr_decay_epochs if epoch >= e)
    return plan.lr_peak * plan.lr_decay_factor ** decays


def _fraction(epoch: float, ramp_epochs: float) -> float:
    return 1.0 if ramp_epochs <= 0 else min(epoch / ramp_epochs, 1.0)


def schedule_state(plan: TrainPlan, spec: LossSpec, step: int, steps_per_epoch: int) -> ScheduleState:
    """Learning rate, radii and coefficient fraction for the given optimizer step."""
    epoch = step / max(steps_per_epoch, 1)
    eps_target = plan.eps_target if plan.eps_target is not None else spec.eps
    ramp = plan.eps_ramp_epochs or 0.0
    bounding = eps_target if ramp <= 0 else eps_target * smoothed_ramp(_fraction(epoch, ramp))
    coef_ramp = plan.coef_ramp_epochs or 0.0
    coef = 1.0 if coef_ramp <= 0 else smoothed_ramp(_fraction(epoch, coef_ramp))
    attack_fraction = _fraction(epoch, plan.attack_eps_ramp_epochs or 0.0)
    if plan.schedule == "long":
        attack_fraction = smoothed_ramp(attack_fraction)
    return ScheduleState(
        step=step,
        epoch=epoch,
        lr=learning_rate(plan, epoch),
        bounding_eps=bounding,
        coef_fraction=coef,
        attack_eps=spec.attack.eps * attack_fraction,
    )


def scheduled_spec(spec: LossSpec, state: ScheduleState) -> LossSpec:
    """The loss spec in force at `state`: ramped radii and coefficient."""
    alpha, lam = spec.alpha, spec.lam
    if spec.family in EXPRESSIVE and spec.family != "exp-ibp":
        alpha = spec.alpha * state.coef_fraction
    if spec.family == "forwabs":
        lam = spec.lam * state.coef_fraction
    return replace(
        spec,
        alpha=alpha,
        lam=lam,
        bounding_eps=state.bounding_eps,
        attack=replace(spec.attack, eps=state.attack_eps),
    )


# -----------------------------
# Optimizers
# -----------------------------
Params = Dict[str, np.ndarray]


def clip_gradients(grads: Params, max_norm: Optional[float]) -> Tuple[Params, float]:
    """Scale all gradients together so their global l2 norm is at most max_norm."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is None or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}, norm


class SGD:
    """Heavy-ball SGD with L2 weight decay folded into the gradient."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Params = {}

    def step(self, params: Params, grads: Params, lr: float) -> Params:
        updated = {}
        for name, p in params.items():
            g = grads[name] + self.weight_decay * p
            v = self.momentum * self.velocity.get(name, np.zeros_like(p)) + g
            self.velocity[name] = v
            updated[name] = p - lr * v
        return updated


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: Params = {}
        self.v: Params = {}

    def step(self, params: Params, grads: Params, lr: float) -> Params:
        self.t += 1
        updated = {}
        for name, p in params.items():
            g = grads[name]
            m = self.beta1 * self.m.get(name, np.zeros_like(p)) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(name, np.zeros_like(p)) + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - self.beta1 ** self.t)
            v_hat = v / (1 - self.beta2 ** self.t)
            updated[name] = p - lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return updated


def get_optimizer(plan: TrainPlan):
    """Optimizer named by a resolved plan."""
    if plan.optimizer == "adam":
        return Adam()
    return SGD(momentum=plan.momentum, weight_decay=plan.weight_decay)


# -----------------------------
# Metrics
# -----------------------------
METRICS_HEADER = [
    "epoch", "clean_acc", "attack_train_acc", "pgd_acc", "ibp_cert_acc",
    "ibp_loss", "forwabs_gap", "lr", "eps_bound", "wall_ms",
]


@dataclass
class EpochMetrics:
    """One row of the metrics CSV. Accuracies are fractions in [0, 1]."""

    epoch: int = 0
    clean_acc: float = 0.0
    attack_train_acc: float = float("nan")
    pgd_acc: float = 0.0
    ibp_cert_acc: float = 0.0
    ibp_loss: float = 0.0
    forwabs_gap: float = 0.0
    lr: float = 0.0
    eps_bound: float = 0.0
    wall_ms: int = 0

    def row(self) -> List[str]:
        values = asdict(self)
        return [str(values[k]) if isinstance(values[k], int) else format(values[k], ".17g") for k in METRICS_HEADER]


def metrics_csv(history: Sequence[EpochMetrics]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for m in history:
        writer.writerow(m.row())
    return buf.getvalue()


def write_metrics(path: str, history: Sequence[EpochMetrics]) -> None:
    """Write the metrics CSV atomically (temp file + rename)."""
    text = metrics_csv(history).encode("utf-8")
    _atomic_write(path, lambda f: f.write(text))
    logger.info("Wrote %d metric rows to %s", len(history), path)


def read_metrics(path: str) -> List[EpochMetrics]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = set(METRICS_HEADER) - set(reader.fieldnames or [])
        if missing:
            raise ConfigError(f"metrics file {path} lacks columns {sorted(missing)}")
        types = {f.name: f.type for f in fields(EpochMetrics)}
        return [
            EpochMetrics(**{k: (int(float(row[k])) if types[k] in (int, "int") else float(row[k])) for k in METRICS_HEADER})
            for row in reader
        ]


@dataclass
class EvalConfig:
    """Held-out evaluation settings.

    Attributes:
        eps: radius for PGD and IBP certification; None uses the training target.
        steps, restarts, step_size: PGD settings (50 steps, 3 restarts, eps/4).
        limit: evaluate at most this many held-out samples.
        batch_size: samples per evaluation batch.
    """

    eps: Optional[float] = None
    steps: int = 50
    restarts: int = 3
    step_size: Optional[float] = None
    limit: Optional[int] = None
    batch_size: int = 256

    def validate(self, prefix: str = "eval") -> "EvalConfig":
        if self.eps is not None and self.eps < 0:
            raise ConfigError("eps must be >= 0", field=f"{prefix}.eps")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1", field=f"{prefix}.steps")
        if self.restarts < 1:
            raise ConfigError("restarts must be >= 1", field=f"{prefix}.restarts")
        if self.limit is not None and self.limit < 0:
            raise ConfigError("limit must be >= 0", field=f"{prefix}.limit")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", field=f"{prefix}.batch_size")
        return self

    def attack_config(self, eps: float, clip_input: bool = False, seed: int = 0) -> AttackConfig:
        return AttackConfig(
            kind="pgd", eps=eps, step_size=self.step_size, steps=self.steps,
            restarts=self.restarts, clip_input=clip_input, seed=seed,
        )


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def evaluate(net: Network, x: np.ndarray, y: np.ndarray, eps: float, attack_cfg: Optional[AttackConfig] = None, *, rng=None, batch_size: int = 256) -> EpochMetrics:
    """Clean, PGD-robust and IBP-certified accuracy (eval-mode batchnorm).

    A sample counts as robust or certified only when it is also classified
    correctly. attack_cfg defaults to PGD-50 with 3 restarts at `eps`.
    """
    if attack_cfg is None:
        attack_cfg = AttackConfig(kind="pgd", eps=eps, steps=50, restarts=3)
    n = len(y)
    if n == 0:
        return EpochMetrics(eps_bound=eps)
    clean = robust = certified = 0
    ibp_total = 0.0
    for part in _batches(n, batch_size):
        xb, yb = x[part], y[part]
        pred = np.argmax(forward(net, xb, "eval").data, axis=1)
        correct = pred == yb
        adv = attack(net, xb, yb, attack_cfg, mode="eval", rng=rng)
        adv_pred = np.argmax(forward(net, adv.x_adv, "eval").data, axis=1)
        bounds = ibp_bounds(net, xb, yb, eps, clip_input=attack_cfg.clip_input)
        cert = min_margin(bounds, yb) >= 0.0
        clean += int(np.sum(correct))
        robust += int(np.sum(correct & (adv_pred == yb)))
        certified += int(np.sum(correct & cert))
        ibp_total += float(cross_entropy(neg(bounds.logit_lower), yb, reduction="sum").data)
    return EpochMetrics(
        clean_acc=clean / n,
        pgd_acc=robust / n,
        ibp_cert_acc=certified / n,
        ibp_loss=ibp_total / n,
        forwabs_gap=float(forwabs_gap(net, eps).total.data),
        eps_bound=eps,
    )


# -----------------------------
# Training
# -----------------------------
def _finite(value) -> bool:
    return all(v is None or math.isfinite(v) for v in value.components().values())


def train(
    net: Network,
    data: Dataset,
    plan: TrainPlan,
    spec: LossSpec,
    *,
    eval_cfg: Optional[EvalConfig] = None,
    record_wall_time: bool = False,
) -> Tuple[Network, List[EpochMetrics]]:
    """Run the full schedule; one EpochMetrics per epoch on the held-out split.

    Deterministic given plan.seed: shuffling, attack noise and evaluation
    restarts all draw from `derive_rng(plan.seed, ...)`.
    """
    spec.validate()
    plan = plan.resolve(spec.family).validate()
    eval_cfg = (eval_cfg or EvalConfig()).validate()
    x_train, y_train = data.part("train")
    heldout_name, x_eval, y_eval = data.heldout()
    if eval_cfg.limit is not None:
        x_eval, y_eval = x_eval[: eval_cfg.limit], y_eval[: eval_cfg.limit]
    eps_target = plan.eps_target if plan.eps_target is not None else spec.eps
    eval_eps = eval_cfg.eps if eval_cfg.eps is not None else eps_target

    steps_per_epoch = max(math.ceil(len(y_train) / plan.batch_size), 1)
    optimizer = get_optimizer(plan)
    history: List[EpochMetrics] = []
    step = 0
    logger.info(
        "Training %s for %d epochs (%s schedule, %d steps/epoch), metrics on %s split",
        spec.family, plan.epochs, plan.schedule, steps_per_epoch, heldout_name,
    )
    for epoch in range(1, plan.epochs + 1):
        started = time.perf_counter()
        order = derive_rng(plan.seed, "shuffle", epoch).permutation(len(y_train))
        seen = 0
        adv_correct = 0.0
        state = schedule_state(plan, spec, step, steps_per_epoch)
        for batch_index, part in enumerate(_batches(len(order), plan.batch_size)):
            idx = order[part]
            xb, yb = x_train[idx], y_train[idx]
            state = schedule_state(plan, spec, step, steps_per_epoch)
            step_spec = scheduled_spec(spec, state)

            tape = Tape()
            view = net.on(tape)
            value = compute_loss(view, xb, yb, step_spec, mode="train", rng=derive_rng(plan.seed, "attack", step))
            if not _finite(value):
                raise NonFiniteLossError(batch_index, value.components(), epoch=epoch)
            grads, _ = clip_gradients(view.gradients(backward(tape, value.total)), plan.grad_clip)
            params = {name: p.data for name, p in net.params.items()}
            net = net.with_params(optimizer.step(params, grads, state.lr))

            if value.adv_accuracy is not None:
                adv_correct += value.adv_accuracy * len(idx)
            seen += len(idx)
            step += 1

        metrics = evaluate(
            net, x_eval, y_eval, eval_eps,
            eval_cfg.attack_config(eval_eps, spec.attack.clip_input),
            rng=derive_rng(plan.seed, "eval", epoch),
            batch_size=eval_cfg.batch_size,
        )
        elapsed_ms = int(round((time.perf_counter() - started) * 1000))
        metrics.epoch = epoch
        metrics.attack_train_acc = adv_correct / seen if seen and spec.family != "ibp" else float("nan")
        metrics.lr = state.lr
        metrics.eps_bound = state.bounding_eps
        metrics.wall_ms = elapsed_ms if record_wall_time else 0
        history.append(metrics)
        logger.info(
            "epoch %d: clean %.3f attack-train %.3f pgd %.3f ibp-cert %.3f lr %.4g eps %.4g (%d ms)",
            epoch, metrics.clean_acc, metrics.attack_train_acc, metrics.pgd_acc,
            metrics.ibp_cert_acc, metrics.lr, metrics.eps_bound, elapsed_ms,
        )
    return net, history


# -----------------------------
# Catastrophic-overfitting detection
# -----------------------------
@dataclass
class COVerdict:
    flagged: bool
    onset_epoch: Optional[int] = None


def _centered_average(values: np.ndarray, window: int) -> np.ndarray:
    half = max(window, 1) // 2
    out = np.empty_like(values)
    for i in range(len(values)):
        chunk = values[max(i - half, 0): i + half + 1]
        out[i] = np.nanmean(chunk) if np.any(~np.isnan(chunk)) else np.nan
    return out


def co_probe(
    history: Sequence[EpochMetrics],
    *,
    pgd_threshold: float = 0.05,
    attack_threshold: float = 0.6,
    window: int = 1,
) -> COVerdict:
    """Flag catastrophic overfitting: held-out PGD accuracy under pgd_threshold
    while training-attack accuracy exceeds attack_threshold in the same epoch
    (after a centered moving average of `window` epochs).
    """
    if not history:
        return COVerdict(False)
    pgd = _centered_average(np.array([m.pgd_acc for m in history], dtype=np.float64), window)
    attacked = _centered_average(np.array([m.attack_train_acc for m in history], dtype=np.float64), window)
    for m, p, a in zip(history, pgd, attacked):
        if p < pgd_threshold and a > attack_threshold:
            return COVerdict(True, m.epoch)
    return COVerdict(False)


# -----------------------------
# Toy-network sweep
# -----------------------------
TOY_INPUT = np.array([[-5.0, 5.0]])
TOY_LABEL = np.array([1])
TOY_EPS = 10.0
TOY_ADV = np.array([[0.0, 0.0]])
SWEEP_HEADER = ["depth", "w", "family", "coefficient", "loss", "adversarial", "ibp", "forwabs"]


@dataclass
class SweepRow:
    """One toy-network loss. `coefficient` is lambda for forwabs and alpha otherwise."""

    depth: int
    w: float
    family: str
    coefficient: float
    loss: float
    adversarial: Optional[float] = None
    ibp: Optional[float] = None
    forwabs: Optional[float] = None


def _sweep_spec(family: str, coefficient: float, attack: AttackConfig) -> LossSpec:
    if family == "forwabs":
        return LossSpec(family, lam=coefficient, attack=attack).validate()
    return LossSpec(family, alpha=coefficient, attack=attack).validate()


def toy_sweep(depths: Sequence[int], ws: Sequence[float], coefficients: Dict[str, Sequence[float]]) -> List[SweepRow]:
    """Loss of each family on toy_network(depth, w) at x = [-5, 5], y = 1, eps = 10.

    `coefficients` maps a family to its grid: lambda values for forwabs,
    alpha values for the others. The adversarial point is fixed at [0, 0],
    where the logit difference is -2 for every w.
    """
    if any(w < 0 for w in ws):
        raise ConfigError("toy sweep w values must be >= 0", field="sweep.w")
    rows: List[SweepRow] = []
    pgd = AttackConfig(kind="pgd", eps=TOY_EPS)
    for depth in depths:
        for w in ws:
            net = toy_network(int(depth), float(w))
            for family, grid in coefficients.items():
                for c in grid:
                    spec = _sweep_spec(family, float(c), pgd)
                    value = compute_loss(net, TOY_INPUT, TOY_LABEL, spec, mode="eval", x_adv=TOY_ADV)
                    rows.append(SweepRow(
                        int(depth), float(w), family, float(c), float(value.total.data),
                        value.adversarial, value.ibp, value.forwabs,
                    ))
    return rows


def _optional(v: Optional[float]) -> str:
    return "" if v is None else format(v, ".17g")


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_HEADER)
    for r in rows:
        writer.writerow([
            r.depth, format(r.w, ".17g"), r.family, format(r.coefficient, ".17g"), format(r.loss, ".17g"),
            _optional(r.adversarial), _optional(r.ibp), _optional(r.forwabs),
        ])
    return buf.getvalue()
