"""
Interval bound propagation with last-layer elision, and the ForwAbs gap.

Bounds are carried as (center, radius) pairs: an affine map W moves the
center through W and the radius through |W|; a ReLU is applied to the
lower/upper ends. The final affine layer is composed with the
logit-difference operator before bounding, so the returned lower bounds
are on z_i = f(x')_y - f(x')_i directly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from errors import ConfigError, LabelError, NonFiniteBoundError
from network import BatchStats, Network, batchnorm_affine
from tensor import (
    Tensor,
    abs_,
    add,
    as_tensor,
    conv2d,
    matmul,
    mul,
    one_hot,
    relu,
    reshape,
    sub,
    sum_,
    transpose,
)

logger = logging.getLogger(__name__)


@dataclass
class BoundsState:
    """Interval bounds of one bounding pass.

    Attributes:
        lower, upper: post-layer bounds l^k, u^k for every affine/conv/batchnorm
            layer, the final affine layer included (before elision).
        logit_lower: (N, k) lower bounds on the logit differences; column y is 0.
        eps: radius of the input ball.
        bn_statistics: "none", "running" or "batch" -- what batchnorm layers used.
    """

    lower: List[Tensor]
    upper: List[Tensor]
    logit_lower: Tensor
    eps: float
    bn_statistics: str = "none"


@dataclass
class ForwAbsGap:
    """Per-layer gap over-approximations delta^k and their final sum."""

    deltas: List[Tensor] = field(default_factory=list)
    total: Optional[Tensor] = None


def _check_finite(t: Tensor, what: str) -> None:
    if not np.all(np.isfinite(t.data)):
        logger.debug("%s: %d non-finite entries of %d", what, int(np.sum(~np.isfinite(t.data))), t.size)
        raise NonFiniteBoundError(f"non-finite {what}")


def _labels(y, n: int, k: int) -> np.ndarray:
    labels = np.asarray(y, dtype=np.int64).reshape(-1)
    if labels.size == 1 and n > 1:
        labels = np.repeat(labels, n)
    if labels.size != n:
        raise LabelError(f"{labels.size} labels for a batch of {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise LabelError(f"label out of range [0, {k - 1}]: {labels.tolist()}")
    return labels


def _elided(w: Tensor, b: Tensor, labels: np.ndarray) -> Tuple[Tensor, Tensor]:
    """Per-sample (N, k, h) weights and (N, k) biases of z = W~ h + b~."""
    k, h = w.shape
    hot = one_hot(labels, k)
    w_y = reshape(matmul(hot, w), (len(labels), 1, h))
    w_tilde = sub(w_y, reshape(w, (1, k, h)))
    b_y = matmul(hot, reshape(b, (k, 1)))
    b_tilde = sub(b_y, reshape(b, (1, k)))
    return w_tilde, b_tilde


def elide_last_layer(net: Network, y: int) -> Tuple[Tensor, Tensor]:
    """W~ row i = W_y - W_i, b~_i = b_y - b_i for the final affine layer."""
    w, b = net.final
    k, h = w.shape
    labels = _labels(y, 1, k)
    w_tilde, b_tilde = _elided(w, b, labels)
    return reshape(w_tilde, (k, h)), reshape(b_tilde, (k,))


def _affine_interval(net: Network, index: int, center: Tensor, radius: Tensor, stats: Optional[BatchStats]):
    layer = net.layers[index]
    if layer.kind == "affine":
        w = net.params[f"{index}.weight"]
        center = add(matmul(center, transpose(w)), net.params[f"{index}.bias"])
        radius = matmul(radius, transpose(abs_(w)))
    elif layer.kind == "conv2d":
        w = net.params[f"{index}.weight"]
        bias = reshape(net.params[f"{index}.bias"], (1, -1, 1, 1))
        center = add(conv2d(center, w, layer.stride, layer.padding), bias)
        radius = conv2d(radius, abs_(w), layer.stride, layer.padding)
    else:
        a, c = batchnorm_affine(net, index, center.ndim, stats)
        center = add(mul(center, a), c)
        radius = mul(radius, abs_(a))
    return center, radius


def ibp_bounds(
    net: Network,
    x,
    y,
    eps: float,
    *,
    bn_stats: Optional[BatchStats] = None,
    clip_input: bool = False,
) -> BoundsState:
    """Interval bounds over the l_inf ball B_eps(x).

    `x` is (N, *input_shape) or one sample; `y` the matching labels.
    With clip_input the ball is intersected with [0, 1] first (off by default).
    Differentiable w.r.t. the network parameters.
    """
    if eps < 0:
        raise ConfigError(f"eps must be >= 0, got {eps}", field="eps")
    x = as_tensor(x)
    if tuple(x.shape) == net.input_shape:
        x = reshape(x, (1,) + net.input_shape)
    n = x.shape[0]
    labels = _labels(y, n, net.num_classes)

    lo, hi = x.data - eps, x.data + eps
    if clip_input:
        lo, hi = np.clip(lo, 0.0, 1.0), np.clip(hi, 0.0, 1.0)
    center = Tensor((lo + hi) / 2.0)
    radius = Tensor((hi - lo) / 2.0)

    lowers: List[Tensor] = []
    uppers: List[Tensor] = []
    for i, layer in enumerate(net.layers[:-1]):
        if layer.is_linear:
            center, radius = _affine_interval(net, i, center, radius, bn_stats)
            lowers.append(sub(center, radius))
            uppers.append(add(center, radius))
        elif layer.kind == "relu":
            low = relu(sub(center, radius))
            high = relu(add(center, radius))
            center = mul(add(low, high), 0.5)
            radius = mul(sub(high, low), 0.5)
        elif layer.kind == "flatten":
            center = reshape(center, (n, -1))
            radius = reshape(radius, (n, -1))

    # final layer: plain bounds for reporting, elided bounds for the logit differences
    last = len(net.layers) - 1
    out_center, out_radius = _affine_interval(net, last, center, radius, bn_stats)
    lowers.append(sub(out_center, out_radius))
    uppers.append(add(out_center, out_radius))

    w, b = net.final
    k, width = w.shape
    w_tilde, b_tilde = _elided(w, b, labels)
    c3 = reshape(center, (n, 1, width))
    r3 = reshape(radius, (n, 1, width))
    logit_lower = add(sub(sum_(mul(w_tilde, c3), axis=2), sum_(mul(abs_(w_tilde), r3), axis=2)), b_tilde)

    for t in lowers + uppers + [logit_lower]:
        _check_finite(t, "interval bound")
    stats_used = "none"
    if any(layer.kind == "batchnorm" for layer in net.layers):
        stats_used = "batch" if bn_stats else "running"
    return BoundsState(lowers, uppers, logit_lower, float(eps), stats_used)


def min_margin(bounds: BoundsState, y) -> np.ndarray:
    """min over i != y of the logit-difference lower bounds, per sample."""
    lower = bounds.logit_lower.data
    labels = _labels(y, lower.shape[0], lower.shape[1])
    masked = lower.copy()
    masked[np.arange(lower.shape[0]), labels] = np.inf
    return masked.min(axis=1)


def ibp_certified(net: Network, x, y, eps: float, **kwargs) -> np.ndarray:
    """Per-sample verdict: True iff every logit-difference lower bound (i != y) is >= 0."""
    return min_margin(ibp_bounds(net, x, y, eps, **kwargs), y) >= 0.0


def forwabs_gap(net: Network, eps: float, *, bn_stats: Optional[BatchStats] = None) -> ForwAbsGap:
    """delta^1 = 2 eps |W^1| 1, delta^k = |W^k| delta^(k-1).

    One pass through the network with every weight replaced by its absolute
    value and no biases. ReLU layers pass delta through unchanged; batchnorm
    layers scale it by |scale / sqrt(var + eps)| (the shift does not change a gap).
    """
    if eps < 0:
        raise ConfigError(f"eps must be >= 0, got {eps}", field="eps")
    delta = Tensor(np.full((1,) + net.input_shape, 2.0 * eps))
    gap = ForwAbsGap()
    for i, layer in enumerate(net.layers):
        if layer.kind == "affine":
            delta = matmul(delta, transpose(abs_(net.params[f"{i}.weight"])))
        elif layer.kind == "conv2d":
            delta = conv2d(delta, abs_(net.params[f"{i}.weight"]), layer.stride, layer.padding)
        elif layer.kind == "batchnorm":
            a, _ = batchnorm_affine(net, i, delta.ndim, bn_stats)
            delta = mul(delta, abs_(a))
        elif layer.kind == "flatten":
            delta = reshape(delta, (1, -1))
            continue
        else:
            continue
        _check_finite(delta, "ForwAbs gap")
        gap.deltas.append(reshape(delta, layer.out_shape))
    gap.total = sum_(gap.deltas[-1])
    return gap
