"""
l_inf attacks: FGSM, RS-FGSM, N-FGSM and PGD-k with restarts.

All attacks read the sign of the input gradient of the summed per-sample
cross-entropy, so each sample's step only depends on its own loss (up to
batchnorm batch statistics in train mode). Randomness comes from the
generator passed in, or from `AttackConfig.seed` when none is given.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from errors import ConfigError
from network import Network, forward
from tensor import Tape, backward, cross_entropy

logger = logging.getLogger(__name__)

ATTACK_KINDS = ("fgsm", "rs-fgsm", "n-fgsm", "pgd")
SINGLE_STEP = ("fgsm", "rs-fgsm", "n-fgsm")


@dataclass
class AttackConfig:
    """Configuration for an l_inf attack.

    Attributes:
        kind: "fgsm", "rs-fgsm", "n-fgsm" or "pgd".
        eps: radius of the threat model (input units).
        step_size: alpha. None picks the kind's default: eps for fgsm and n-fgsm,
            1.25 * eps for rs-fgsm, eps / 4 for pgd.
        steps: iterations (1 for the single-step kinds).
        restarts: pgd restarts; the highest-loss iterate per sample is kept.
        noise_multiplier: k in N-FGSM's U[-k eps, k eps] start.
        random_start: pgd starts from U[-eps, eps] (else from x).
        clip_input: clamp every iterate to the input domain [0, 1].
        seed: used when no generator is passed to the attack.
    """

    kind: str = "pgd"
    eps: float = 0.1
    step_size: Optional[float] = None
    steps: int = 10
    restarts: int = 1
    noise_multiplier: float = 2.0
    random_start: bool = True
    clip_input: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind in SINGLE_STEP:
            self.steps = 1

    def validate(self, prefix: str = "attack") -> "AttackConfig":
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"kind must be one of {', '.join(ATTACK_KINDS)}", field=f"{prefix}.kind")
        if self.eps < 0:
            raise ConfigError("eps must be >= 0", field=f"{prefix}.eps")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1", field=f"{prefix}.steps")
        if self.restarts < 1:
            raise ConfigError("restarts must be >= 1", field=f"{prefix}.restarts")
        if self.step_size is not None and self.step_size < 0:
            raise ConfigError("step_size must be >= 0", field=f"{prefix}.step_size")
        if self.noise_multiplier < 0:
            raise ConfigError("noise_multiplier must be >= 0", field=f"{prefix}.noise_multiplier")
        return self

    @property
    def alpha(self) -> float:
        if self.step_size is not None:
            return self.step_size
        if self.kind == "rs-fgsm":
            return 1.25 * self.eps
        if self.kind == "pgd":
            return self.eps / 4.0
        return self.eps

    @property
    def projects(self) -> bool:
        """Whether outputs are guaranteed to stay inside B_eps(x)."""
        return self.kind != "n-fgsm"


@dataclass
class AdversarialBatch:
    x_adv: np.ndarray
    in_ball: np.ndarray


# -----------------------------
# Gradients and losses at a point
# -----------------------------
def input_gradient(net: Network, x: np.ndarray, y: np.ndarray, mode: str = "eval") -> np.ndarray:
    """d/dx of the summed per-sample cross-entropy; running stats untouched."""
    tape = Tape()
    xt = tape.watch(x)
    loss = cross_entropy(forward(net, xt, mode, update_running=False), y, reduction="sum")
    return backward(tape, loss).of(xt)


def per_sample_loss(net: Network, x: np.ndarray, y: np.ndarray, mode: str = "eval") -> np.ndarray:
    return cross_entropy(forward(net, x, mode, update_running=False), y, reduction="none").data


def _finish(x: np.ndarray, x_adv: np.ndarray, cfg: AttackConfig) -> AdversarialBatch:
    if cfg.clip_input:
        x_adv = np.clip(x_adv, 0.0, 1.0)
    dist = np.abs(x_adv - x).reshape(len(x), -1).max(axis=1) if x.size else np.zeros(len(x))
    return AdversarialBatch(x_adv=x_adv, in_ball=dist <= cfg.eps + 1e-12)


def _rng(cfg: AttackConfig, rng: Optional[np.random.Generator]) -> np.random.Generator:
    return rng if rng is not None else np.random.default_rng(cfg.seed)


def _expect(cfg: AttackConfig, kind: str) -> None:
    if cfg.kind != kind:
        raise ConfigError(f"expected a {kind} config, got '{cfg.kind}'", field="attack.kind")


# -----------------------------
# Attacks
# -----------------------------
def fgsm(net: Network, x: np.ndarray, y: np.ndarray, cfg: AttackConfig, *, mode: str = "eval", rng=None) -> AdversarialBatch:
    """x + eps * sign(grad_x L): one gradient, lands on a corner of the ball."""
    _expect(cfg, "fgsm")
    g = input_gradient(net, x, y, mode)
    return _finish(x, x + cfg.eps * np.sign(g), cfg)


def rs_fgsm(net: Network, x: np.ndarray, y: np.ndarray, cfg: AttackConfig, *, mode: str = "eval", rng=None) -> AdversarialBatch:
    """FGSM step of size alpha from a uniform start in the ball, projected back."""
    _expect(cfg, "rs-fgsm")
    rng = _rng(cfg, rng)
    start = x + rng.uniform(-cfg.eps, cfg.eps, size=x.shape)
    if cfg.clip_input:
        start = np.clip(start, 0.0, 1.0)
    g = input_gradient(net, start, y, mode)
    step = start + cfg.alpha * np.sign(g)
    return _finish(x, x + np.clip(step - x, -cfg.eps, cfg.eps), cfg)


def n_fgsm(net: Network, x: np.ndarray, y: np.ndarray, cfg: AttackConfig, *, mode: str = "eval", rng=None) -> AdversarialBatch:
    """FGSM step from noise in [-k eps, k eps], no projection (may leave the ball)."""
    _expect(cfg, "n-fgsm")
    rng = _rng(cfg, rng)
    k = cfg.noise_multiplier
    start = x + rng.uniform(-k * cfg.eps, k * cfg.eps, size=x.shape)
    if cfg.clip_input:
        start = np.clip(start, 0.0, 1.0)
    g = input_gradient(net, start, y, mode)
    return _finish(x, start + cfg.alpha * np.sign(g), cfg)


def pgd(net: Network, x: np.ndarray, y: np.ndarray, cfg: AttackConfig, *, mode: str = "eval", rng=None) -> AdversarialBatch:
    """Signed-gradient steps projected onto B_eps(x) after every iteration.

    Over restarts, the final iterate with the highest per-sample loss is kept;
    ties keep the earlier restart.
    """
    _expect(cfg, "pgd")
    rng = _rng(cfg, rng)
    y = np.asarray(y)
    best = np.array(x, dtype=np.float64)
    best_loss = np.full(len(x), -np.inf)
    for restart in range(cfg.restarts):
        if cfg.random_start:
            delta = rng.uniform(-cfg.eps, cfg.eps, size=x.shape)
        else:
            delta = np.zeros_like(x, dtype=np.float64)
        if cfg.clip_input:
            delta = np.clip(x + delta, 0.0, 1.0) - x
        for _ in range(cfg.steps):
            g = input_gradient(net, x + delta, y, mode)
            delta = np.clip(delta + cfg.alpha * np.sign(g), -cfg.eps, cfg.eps)
            if cfg.clip_input:
                delta = np.clip(x + delta, 0.0, 1.0) - x
        candidate = x + delta
        loss = per_sample_loss(net, candidate, y, mode)
        better = loss > best_loss
        best = np.where(better.reshape((-1,) + (1,) * (x.ndim - 1)), candidate, best)
        best_loss = np.where(better, loss, best_loss)
        logger.debug("pgd restart %d: mean loss %.6g", restart, float(np.mean(loss)) if len(loss) else 0.0)
    return _finish(x, best, cfg)


_DISPATCH = {"fgsm": fgsm, "rs-fgsm": rs_fgsm, "n-fgsm": n_fgsm, "pgd": pgd}


def attack(net: Network, x: np.ndarray, y: np.ndarray, cfg: AttackConfig, *, mode: str = "eval", rng=None) -> AdversarialBatch:
    """Run the attack named by cfg.kind."""
    cfg.validate()
    x = np.asarray(x, dtype=np.float64)
    if cfg.eps == 0:
        return AdversarialBatch(x_adv=x.copy(), in_ball=np.ones(len(x), dtype=bool))
    return _DISPATCH[cfg.kind](net, x, y, cfg, mode=mode, rng=rng)
