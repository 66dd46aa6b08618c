"""
Training losses: adversarial, IBP and the expressive families between them
(MTL-IBP, Exp-IBP, CC-IBP, SABR), plus the ForwAbs-regularized adversarial
loss.

Every loss takes the network (usually a tape view from `net.on(tape)`), a
batch and a `LossSpec`, and returns a `LossValue` whose `total` is a
differentiable scalar Tensor. The attack itself runs on a detached copy, so
x_adv enters the loss as a constant input.

In train mode batchnorm layers normalize with the current batch; interval
bounds and ForwAbs gaps then reuse the statistics recorded by the forward
pass at x_adv (for family "ibp", by a clean forward at x).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from attacks import AttackConfig, attack
from bounds import forwabs_gap, ibp_bounds
from errors import ConfigError
from network import BatchStats, Network, forward, logit_differences
from tensor import Tensor, abs_, add, clamp, cross_entropy, exp, log, mul, neg, sum_

logger = logging.getLogger(__name__)

FAMILIES = ("adversarial", "ibp", "mtl-ibp", "exp-ibp", "cc-ibp", "sabr", "forwabs")
EXPRESSIVE = ("mtl-ibp", "exp-ibp", "cc-ibp", "sabr")
LOG_FLOOR = 1e-300


@dataclass
class LossSpec:
    """Which loss to train with and its coefficients.

    Attributes:
        family: one of FAMILIES.
        alpha: over-approximation coefficient of the expressive families, in [0, 1].
        lam: ForwAbs regularization weight (config key "lambda"), >= 0.
        attack: attack producing x_adv.
        bounding_eps: radius for IBP / ForwAbs; None means attack.eps.
        l1: weight of an l1 penalty on affine/conv weights, >= 0.
    """

    family: str
    alpha: float = 0.5
    lam: float = 0.0
    attack: AttackConfig = field(default_factory=AttackConfig)
    bounding_eps: Optional[float] = None
    l1: float = 0.0

    def validate(self, prefix: str = "loss") -> "LossSpec":
        if self.family not in FAMILIES:
            raise ConfigError(f"family must be one of {', '.join(FAMILIES)}", field=f"{prefix}.family")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must be in [0,1]", field=f"{prefix}.alpha")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0", field=f"{prefix}.lambda")
        if self.bounding_eps is not None and self.bounding_eps < 0:
            raise ConfigError("bounding_eps must be >= 0", field=f"{prefix}.bounding_eps")
        if self.l1 < 0:
            raise ConfigError("l1 must be >= 0", field=f"{prefix}.l1")
        self.attack.validate()
        return self

    @property
    def eps(self) -> float:
        return self.attack.eps if self.bounding_eps is None else self.bounding_eps


@dataclass
class LossValue:
    """A loss and the components it was combined from (floats, before combination)."""

    total: Tensor
    adversarial: Optional[float] = None
    ibp: Optional[float] = None
    forwabs: Optional[float] = None
    adv_accuracy: Optional[float] = None

    def components(self) -> Dict[str, Optional[float]]:
        return {
            "total": float(self.total.data),
            "adversarial": self.adversarial,
            "ibp": self.ibp,
            "forwabs": self.forwabs,
        }


# -----------------------------
# Shared pieces
# -----------------------------
def _adversarial_forward(
    net: Network, x, y, spec: LossSpec, mode: str, rng, x_adv
) -> Tuple[np.ndarray, Tensor, Optional[BatchStats]]:
    if x_adv is None:
        x_adv = attack(net.detached(), x, y, spec.attack, mode=mode, rng=rng).x_adv
    stats: Optional[BatchStats] = {} if mode == "train" else None
    logits = forward(net, x_adv, mode, record=stats)
    return np.asarray(x_adv, dtype=np.float64), logits, stats


def _accuracy(logits: Tensor, y) -> float:
    pred = np.argmax(logits.data.reshape(-1, logits.shape[-1]), axis=1)
    return float(np.mean(pred == np.asarray(y).reshape(-1)))


def geometric_combination(a: Tensor, b: Tensor, alpha: float) -> Tensor:
    """a^(1 - alpha) * b^alpha evaluated as exp((1 - alpha) log a + alpha log b).

    Both inputs are floored at LOG_FLOOR before the logs; alpha 0 and 1 return
    the matching input unchanged.
    """
    if alpha == 0.0:
        return a
    if alpha == 1.0:
        return b
    log_a = log(clamp(a, LOG_FLOOR))
    log_b = log(clamp(b, LOG_FLOOR))
    return exp(add(mul(log_a, 1.0 - alpha), mul(log_b, alpha)))


def convex_combination(a: Tensor, b: Tensor, alpha: float) -> Tensor:
    if alpha == 0.0:
        return a
    if alpha == 1.0:
        return b
    return add(mul(a, 1.0 - alpha), mul(b, alpha))


def l1_penalty(net: Network) -> Tensor:
    total: Tensor = Tensor(0.0)
    for name in net.weight_names():
        total = add(total, sum_(abs_(net.params[name])))
    return total


# -----------------------------
# Families
# -----------------------------
def adversarial_loss(net: Network, x, y, spec: LossSpec, *, mode: str = "eval", rng=None, x_adv=None) -> LossValue:
    """Cross-entropy at the attack output."""
    _, logits, _ = _adversarial_forward(net, x, y, spec, mode, rng, x_adv)
    total = cross_entropy(logits, y)
    return LossValue(total, adversarial=float(total.data), adv_accuracy=_accuracy(logits, y))


def ibp_loss(net: Network, x, y, eps: float, *, bn_stats: Optional[BatchStats] = None, clip_input: bool = False) -> LossValue:
    """Cross-entropy of the negated logit-difference lower bounds over B_eps(x)."""
    bounds = ibp_bounds(net, x, y, eps, bn_stats=bn_stats, clip_input=clip_input)
    total = cross_entropy(neg(bounds.logit_lower), y)
    return LossValue(total, ibp=float(total.data))


def _clean_ibp(net: Network, x, y, spec: LossSpec, mode: str) -> LossValue:
    stats: Optional[BatchStats] = None
    if mode == "train":
        stats = {}
        forward(net, x, "train", record=stats)
    return ibp_loss(net, x, y, spec.eps, bn_stats=stats, clip_input=spec.attack.clip_input)


def mtl_ibp(net: Network, x, y, spec: LossSpec, *, mode: str = "eval", rng=None, x_adv=None) -> LossValue:
    """(1 - alpha) L_adv + alpha L_IBP."""
    _, logits, stats = _adversarial_forward(net, x, y, spec, mode, rng, x_adv)
    l_adv = cross_entropy(logits, y)
    l_ibp = ibp_loss(net, x, y, spec.eps, bn_stats=stats, clip_input=spec.attack.clip_input).total
    return LossValue(
        convex_combination(l_adv, l_ibp, spec.alpha),
        adversarial=float(l_adv.data),
        ibp=float(l_ibp.data),
        adv_accuracy=_accuracy(logits, y),
    )


def exp_ibp(net: Network, x, y, spec: LossSpec, *, mode: str = "eval", rng=None, x_adv=None) -> LossValue:
    """L_adv^(1 - alpha) * L_IBP^alpha, computed in log space."""
    _, logits, stats = _adversarial_forward(net, x, y, spec, mode, rng, x_adv)
    l_adv = cross_entropy(logits, y)
    l_ibp = ibp_loss(net, x, y, spec.eps, bn_stats=stats, clip_input=spec.attack.clip_input).total
    return LossValue(
        geometric_combination(l_adv, l_ibp, spec.alpha),
        adversarial=float(l_adv.data),
        ibp=float(l_ibp.data),
        adv_accuracy=_accuracy(logits, y),
    )


def cc_ibp(net: Network, x, y, spec: LossSpec, *, mode: str = "eval", rng=None, x_adv=None) -> LossValue:
    """Cross-entropy of -[(1 - alpha) z(x_adv) + alpha * IBP lower bounds]."""
    _, logits, stats = _adversarial_forward(net, x, y, spec, mode, rng, x_adv)
    l_adv = cross_entropy(logits, y)
    bounds = ibp_bounds(net, x, y, spec.eps, bn_stats=stats, clip_input=spec.attack.clip_input)
    l_ibp = cross_entropy(neg(bounds.logit_lower), y)
    if spec.alpha == 0.0:
        total = l_adv
    elif spec.alpha == 1.0:
        total = l_ibp
    else:
        mixed = convex_combination(logit_differences(logits, y), bounds.logit_lower, spec.alpha)
        total = cross_entropy(neg(mixed), y)
    return LossValue(total, adversarial=float(l_adv.data), ibp=float(l_ibp.data), adv_accuracy=_accuracy(logits, y))


def sabr_center(x: np.ndarray, x_adv: np.ndarray, eps: float, alpha: float, projects: bool) -> np.ndarray:
    """x_adv projected onto B_((1 - alpha) eps)(x); raw x_adv when the attack does not project."""
    if not projects:
        return x_adv
    reach = (1.0 - alpha) * eps
    return x + np.clip(x_adv - x, -reach, reach)


def sabr(net: Network, x, y, spec: LossSpec, *, mode: str = "eval", rng=None, x_adv=None) -> LossValue:
    """IBP loss over the shrunken ball B_(alpha eps)(x_alpha)."""
    x = np.asarray(x, dtype=np.float64)
    x_adv, logits, stats = _adversarial_forward(net, x, y, spec, mode, rng, x_adv)
    l_adv = cross_entropy(logits, y)
    center = sabr_center(x, x_adv, spec.eps, spec.alpha, spec.attack.projects)
    small = ibp_loss(net, center, y, spec.alpha * spec.eps, bn_stats=stats, clip_input=spec.attack.clip_input)
    return LossValue(small.total, adversarial=float(l_adv.data), ibp=small.ibp, adv_accuracy=_accuracy(logits, y))


def forwabs_loss(net: Network, x, y, spec: LossSpec, *, mode: str = "eval", rng=None, x_adv=None) -> LossValue:
    """L_adv + lambda * 1^T delta^n."""
    _, logits, stats = _adversarial_forward(net, x, y, spec, mode, rng, x_adv)
    l_adv = cross_entropy(logits, y)
    gap = forwabs_gap(net, spec.eps, bn_stats=stats).total
    total = l_adv if spec.lam == 0.0 else add(l_adv, mul(gap, spec.lam))
    return LossValue(total, adversarial=float(l_adv.data), forwabs=float(gap.data), adv_accuracy=_accuracy(logits, y))


_FAMILY_FNS = {
    "adversarial": adversarial_loss,
    "mtl-ibp": mtl_ibp,
    "exp-ibp": exp_ibp,
    "cc-ibp": cc_ibp,
    "sabr": sabr,
    "forwabs": forwabs_loss,
}


def compute_loss(net: Network, x, y, spec: LossSpec, *, mode: str = "eval", rng=None, x_adv=None) -> LossValue:
    """Loss of `spec.family`, plus the l1 weight penalty when spec.l1 > 0."""
    if spec.family == "ibp":
        value = _clean_ibp(net, x, y, spec, mode)
    elif spec.family in _FAMILY_FNS:
        value = _FAMILY_FNS[spec.family](net, x, y, spec, mode=mode, rng=rng, x_adv=x_adv)
    else:
        raise ConfigError(f"unknown loss family '{spec.family}'", field="loss.family")
    if spec.l1 > 0:
        value.total = add(value.total, mul(l1_penalty(net), spec.l1))
    logger.debug("%s loss %s", spec.family, value.components())
    return value
