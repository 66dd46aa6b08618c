"""
Layer stacks, parameter storage, initialization, forward evaluation and
checkpoints.

A `Network` owns its parameters as untracked `Tensor`s and its BatchNorm
running statistics as plain arrays. `net.on(tape)` returns a view whose
parameters are leaves of `tape`; the running-statistics dict is shared, so
train-mode updates made through the view land in the original network.

Usage example:
  net = build_preset("mlp-small", num_classes=3, input_shape=(2,), seed=0)
  logits = forward(net, np.zeros((4, 2)))
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import CheckpointError, ConfigError, LabelError, ShapeError
from tensor import (
    Gradients,
    Tape,
    Tensor,
    add,
    as_tensor,
    conv2d,
    matmul,
    mean,
    mul,
    one_hot,
    relu,
    reshape,
    sqrt,
    sub,
    sum_,
    transpose,
)

logger = logging.getLogger(__name__)

LAYER_KINDS = ("affine", "conv2d", "relu", "flatten", "batchnorm")
INIT_SCHEMES = ("default", "ibp-aware")
PRESETS = ("toy", "mlp-small", "cnn-mini", "cnn5-thin")
CHECKPOINT_VERSION = 1


@dataclass
class Layer:
    """One layer of a feed-forward stack.

    Attributes:
        kind: one of LAYER_KINDS.
        out: output units (affine) or output channels (conv2d); unused otherwise.
        kernel: square kernel size for conv2d.
        stride: conv2d stride.
        padding: conv2d zero padding on each side.
        momentum: batchnorm running-statistics momentum.
        eps: batchnorm variance floor.
        in_shape: per-sample input shape, filled in when the network is built.
        out_shape: per-sample output shape, filled in when the network is built.
    """

    kind: str
    out: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    momentum: float = 0.1
    eps: float = 1e-5
    in_shape: Tuple[int, ...] = ()
    out_shape: Tuple[int, ...] = ()

    @property
    def is_linear(self) -> bool:
        """Affine-like layers: the ones interval bounds transform with |W|."""
        return self.kind in ("affine", "conv2d", "batchnorm")


@dataclass
class Network:
    layers: List[Layer]
    input_shape: Tuple[int, ...]
    num_classes: int
    params: Dict[str, Tensor] = field(default_factory=dict)
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)

    # -----------------------------
    # Parameter views
    # -----------------------------
    def on(self, tape: Tape) -> "Network":
        """View whose parameters are watched leaves of `tape`."""
        tracked = {name: tape.watch(p) for name, p in self.params.items()}
        return Network(self.layers, self.input_shape, self.num_classes, tracked, self.buffers)

    def gradients(self, grads: Gradients) -> Dict[str, np.ndarray]:
        """Pull parameter gradients out of a gradient map (view from `on`)."""
        return {name: grads.of(p) for name, p in self.params.items()}

    def with_params(self, updates: Dict[str, np.ndarray]) -> "Network":
        """Copy with some parameters replaced; running statistics are copied."""
        params = dict(self.params)
        for name, value in updates.items():
            if name not in params:
                raise KeyError(name)
            value = np.asarray(value, dtype=np.float64)
            if value.shape != params[name].shape:
                raise ShapeError(f"{name}: expected shape {params[name].shape}, got {value.shape}")
            params[name] = Tensor(value)
        return Network(self.layers, self.input_shape, self.num_classes, params, dict(self.buffers))

    def copy(self) -> "Network":
        return self.with_params({})

    def detached(self) -> "Network":
        """Same parameters off any tape; running statistics are shared, not copied."""
        params = {name: Tensor(p.data) for name, p in self.params.items()}
        return Network(self.layers, self.input_shape, self.num_classes, params, self.buffers)

    def weight_names(self) -> List[str]:
        return [f"{i}.weight" for i, layer in enumerate(self.layers) if layer.kind in ("affine", "conv2d")]

    @property
    def final(self) -> Tuple[Tensor, Tensor]:
        """(W, b) of the final affine layer."""
        i = len(self.layers) - 1
        return self.params[f"{i}.weight"], self.params[f"{i}.bias"]


# -----------------------------
# Construction
# -----------------------------
def _infer_shapes(layer: Layer, in_shape: Tuple[int, ...]) -> Tuple[int, ...]:
    if layer.kind == "affine":
        if len(in_shape) != 1:
            raise ShapeError(f"affine layer needs a flat input, got {in_shape} (add a flatten layer)")
        return (layer.out,)
    if layer.kind == "conv2d":
        if len(in_shape) != 3:
            raise ShapeError(f"conv2d layer needs (C, H, W) input, got {in_shape}")
        _, h, w = in_shape
        ho = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
        wo = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d kernel {layer.kernel} does not fit input {in_shape}")
        return (layer.out, ho, wo)
    if layer.kind == "flatten":
        return (int(np.prod(in_shape)),)
    if layer.kind in ("relu", "batchnorm"):
        return tuple(in_shape)
    raise ConfigError(f"unknown layer kind '{layer.kind}'", field="network.layers")


def build_network(
    input_shape: Sequence[int],
    layers: Sequence[Layer],
    num_classes: int,
    *,
    init_scheme: str = "default",
    seed: int = 0,
) -> Network:
    """Infer shapes, allocate parameters and initialize them."""
    shape = tuple(int(s) for s in input_shape)
    built: List[Layer] = []
    for layer in layers:
        out_shape = _infer_shapes(layer, shape)
        built.append(Layer(**{**asdict(layer), "in_shape": shape, "out_shape": out_shape}))
        shape = out_shape
    if not built or built[-1].kind != "affine" or built[-1].out != num_classes:
        raise ShapeError(f"final layer must be affine with {num_classes} outputs")

    net = Network(built, tuple(int(s) for s in input_shape), num_classes)
    for i, layer in enumerate(built):
        if layer.kind == "batchnorm":
            channels = layer.in_shape[0]
            net.params[f"{i}.scale"] = Tensor(np.ones(channels))
            net.params[f"{i}.shift"] = Tensor(np.zeros(channels))
            net.buffers[f"{i}.running_mean"] = np.zeros(channels)
            net.buffers[f"{i}.running_var"] = np.ones(channels)
    return init(net, init_scheme, seed)


def mlp(input_shape: Sequence[int], hidden: Sequence[int], num_classes: int, *, activation: bool = True, **kwargs) -> Network:
    """flatten -> (affine -> relu) * len(hidden) -> affine. activation=False gives a deep linear network."""
    layers: List[Layer] = [Layer("flatten")]
    for width in hidden:
        layers.append(Layer("affine", out=width))
        if activation:
            layers.append(Layer("relu"))
    layers.append(Layer("affine", out=num_classes))
    return build_network(input_shape, layers, num_classes, **kwargs)


def init(net: Network, scheme: str = "default", seed: int = 0) -> Network:
    """Fresh parameters for every affine/conv layer; batchnorm reset to identity.

    default:   W, b ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    ibp-aware: W ~ N(0, s^2) with s = sqrt(pi/2)/fan_in so E|W_ij| = 1/fan_in and the
               expected row-wise l1 norm of W is 1; b = 0. Keeps interval widths from
               growing layer over layer at initialization.
    """
    if scheme not in INIT_SCHEMES:
        raise ConfigError(f"unknown init scheme '{scheme}'", field="network.init")
    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = dict(net.params)
    for i, layer in enumerate(net.layers):
        if layer.kind == "affine":
            fan_in = layer.in_shape[0]
            w_shape: Tuple[int, ...] = (layer.out, fan_in)
        elif layer.kind == "conv2d":
            fan_in = layer.in_shape[0] * layer.kernel * layer.kernel
            w_shape = (layer.out, layer.in_shape[0], layer.kernel, layer.kernel)
        elif layer.kind == "batchnorm":
            channels = layer.in_shape[0]
            params[f"{i}.scale"] = Tensor(np.ones(channels))
            params[f"{i}.shift"] = Tensor(np.zeros(channels))
            continue
        else:
            continue
        if scheme == "default":
            bound = 1.0 / np.sqrt(fan_in)
            params[f"{i}.weight"] = Tensor(rng.uniform(-bound, bound, size=w_shape))
            params[f"{i}.bias"] = Tensor(rng.uniform(-bound, bound, size=(layer.out,)))
        else:
            std = np.sqrt(np.pi / 2.0) / fan_in
            params[f"{i}.weight"] = Tensor(rng.normal(0.0, std, size=w_shape))
            params[f"{i}.bias"] = Tensor(np.zeros(layer.out))
    buffers = {k: (np.zeros_like(v) if k.endswith("mean") else np.ones_like(v)) for k, v in net.buffers.items()}
    return Network(net.layers, net.input_shape, net.num_classes, params, buffers)


def toy_network(depth: int, w: float) -> Network:
    """Two-unit network of `depth` affine layers with IBP bounds tunable through w.

    x1 = ReLU([[w, -w], [-w, w]] x0), xk = ReLU(2I x(k-1)) for the middle layers,
    output = 2I x(n-1) + [3, 1]. For w >= 0 and label 1 the logit difference
    to class 0 is w * 2^(n-1) * (x0[1] - x0[0]) - 2.
    """
    if depth < 2:
        raise ConfigError("toy network depth must be >= 2", field="network.toy_depth")
    if w < 0:
        raise ConfigError("toy network width parameter w must be >= 0", field="network.toy_width")
    layers = [Layer("affine", out=2), Layer("relu")]
    for _ in range(depth - 2):
        layers += [Layer("affine", out=2), Layer("relu")]
    layers.append(Layer("affine", out=2))
    net = build_network((2,), layers, 2)

    params: Dict[str, np.ndarray] = {}
    affine_ids = [i for i, layer in enumerate(net.layers) if layer.kind == "affine"]
    for rank, i in enumerate(affine_ids):
        if rank == 0:
            params[f"{i}.weight"] = np.array([[w, -w], [-w, w]], dtype=np.float64)
            params[f"{i}.bias"] = np.zeros(2)
        else:
            params[f"{i}.weight"] = 2.0 * np.eye(2)
            params[f"{i}.bias"] = np.array([3.0, 1.0]) if i == affine_ids[-1] else np.zeros(2)
    return net.with_params(params)


def build_preset(
    name: str,
    num_classes: int,
    input_shape: Optional[Sequence[int]] = None,
    *,
    seed: int = 0,
    init_scheme: str = "default",
    depth: int = 2,
    w: float = 1.0,
) -> Network:
    """Named architectures.

    toy        -- toy_network(depth, w); 2 inputs, 2 classes.
    mlp-small  -- flatten, 100, 100, k.
    cnn-mini   -- conv 8@3x3/1/1, conv 16@4x4/2/1, linear 64, k.
    cnn5-thin  -- conv 16@3x3/1/1, conv 16@4x4/2/1, conv 32@4x4/2/1, linear 128, k;
                  each hidden layer followed by batchnorm and ReLU.
    """
    if name == "toy":
        if num_classes != 2:
            raise ConfigError("toy network has exactly 2 classes", field="network.preset")
        return toy_network(depth, w)
    if input_shape is None:
        raise ConfigError(f"preset '{name}' needs an input shape", field="network.preset")
    if name == "mlp-small":
        return mlp(input_shape, [100, 100], num_classes, init_scheme=init_scheme, seed=seed)
    if name == "cnn-mini":
        layers = [
            Layer("conv2d", out=8, kernel=3, stride=1, padding=1), Layer("relu"),
            Layer("conv2d", out=16, kernel=4, stride=2, padding=1), Layer("relu"),
            Layer("flatten"),
            Layer("affine", out=64), Layer("relu"),
            Layer("affine", out=num_classes),
        ]
        return build_network(input_shape, layers, num_classes, init_scheme=init_scheme, seed=seed)
    if name == "cnn5-thin":
        layers = [
            Layer("conv2d", out=16, kernel=3, stride=1, padding=1), Layer("batchnorm"), Layer("relu"),
            Layer("conv2d", out=16, kernel=4, stride=2, padding=1), Layer("batchnorm"), Layer("relu"),
            Layer("conv2d", out=32, kernel=4, stride=2, padding=1), Layer("batchnorm"), Layer("relu"),
            Layer("flatten"),
            Layer("affine", out=128), Layer("batchnorm"), Layer("relu"),
            Layer("affine", out=num_classes),
        ]
        return build_network(input_shape, layers, num_classes, init_scheme=init_scheme, seed=seed)
    raise ConfigError(f"unknown preset '{name}' (choose from {', '.join(PRESETS)})", field="network.preset")


# -----------------------------
# Forward evaluation
# -----------------------------
BatchStats = Dict[int, Tuple[np.ndarray, np.ndarray]]


def _bn_view(values: np.ndarray, ndim: int) -> np.ndarray:
    return values.reshape((1, -1) + (1,) * (ndim - 2))


def batchnorm_affine(net: Network, index: int, ndim: int, stats: Optional[BatchStats] = None) -> Tuple[Tensor, Tensor]:
    """Elementwise (a, c) with bn(h) = a * h + c, statistics held constant.

    Uses `stats[index]` when given (batch statistics of a train-mode pass),
    else the running statistics.
    """
    layer = net.layers[index]
    if stats is not None and index in stats:
        mu, var = stats[index]
    else:
        mu, var = net.buffers[f"{index}.running_mean"], net.buffers[f"{index}.running_var"]
    scale = reshape(net.params[f"{index}.scale"], _bn_view(mu, ndim).shape)
    shift = reshape(net.params[f"{index}.shift"], _bn_view(mu, ndim).shape)
    a = scale / np.sqrt(_bn_view(var, ndim) + layer.eps)
    c = shift - a * _bn_view(mu, ndim)
    return a, c


def _batchnorm_train(net: Network, index: int, h: Tensor, record: Optional[BatchStats], update_running: bool) -> Tensor:
    layer = net.layers[index]
    axes = (0,) if h.ndim == 2 else (0, 2, 3)
    mu = mean(h, axis=axes, keepdims=True)
    centered = sub(h, mu)
    var = mean(mul(centered, centered), axis=axes, keepdims=True)
    normalized = centered / sqrt(var + layer.eps)
    view = mu.shape
    out = add(mul(normalized, reshape(net.params[f"{index}.scale"], view)), reshape(net.params[f"{index}.shift"], view))

    mu_np, var_np = mu.data.reshape(-1), var.data.reshape(-1)
    if record is not None:
        record[index] = (mu_np.copy(), var_np.copy())
    if update_running:
        m = layer.momentum
        net.buffers[f"{index}.running_mean"] = (1 - m) * net.buffers[f"{index}.running_mean"] + m * mu_np
        net.buffers[f"{index}.running_var"] = (1 - m) * net.buffers[f"{index}.running_var"] + m * var_np
    return out


def forward(
    net: Network,
    x,
    mode: str = "eval",
    *,
    record: Optional[BatchStats] = None,
    update_running: bool = True,
) -> Tensor:
    """Logits of `x` (batched (N, *input_shape) or a single sample).

    mode "train": batchnorm uses current-batch statistics (stored in `record`
    when given) and, unless update_running=False, updates the running stats.
    mode "eval": batchnorm uses the running statistics.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got '{mode}'", field="mode")
    h = as_tensor(x)
    single = tuple(h.shape) == net.input_shape
    if single:
        h = reshape(h, (1,) + net.input_shape)
    elif tuple(h.shape[1:]) != net.input_shape:
        raise ShapeError(f"input shape {h.shape} does not match network input {net.input_shape}")

    for i, layer in enumerate(net.layers):
        if layer.kind == "affine":
            h = add(matmul(h, transpose(net.params[f"{i}.weight"])), net.params[f"{i}.bias"])
        elif layer.kind == "conv2d":
            bias = reshape(net.params[f"{i}.bias"], (1, -1, 1, 1))
            h = add(conv2d(h, net.params[f"{i}.weight"], layer.stride, layer.padding), bias)
        elif layer.kind == "relu":
            h = relu(h)
        elif layer.kind == "flatten":
            h = reshape(h, (h.shape[0], -1))
        elif layer.kind == "batchnorm":
            if mode == "train":
                h = _batchnorm_train(net, i, h, record, update_running)
            else:
                a, c = batchnorm_affine(net, i, h.ndim)
                h = add(mul(h, a), c)
    return reshape(h, (net.num_classes,)) if single else h


def logit_differences(logits, y) -> Tensor:
    """z_i = logits_y - logits_i; z_y = 0. Batched: logits (N, k), y (N,)."""
    logits = as_tensor(logits)
    single = logits.ndim == 1
    if single:
        logits = reshape(logits, (1, -1))
    k = logits.shape[1]
    labels = np.asarray(y, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"label out of range [0, {k - 1}]: {labels.tolist()}")
    picked = sum_(mul(logits, one_hot(labels, k)), axis=1, keepdims=True)
    z = sub(picked, logits)
    return reshape(z, (k,)) if single else z


def predict(net: Network, x: np.ndarray, mode: str = "eval") -> np.ndarray:
    return np.argmax(forward(net, x, mode, update_running=False).data, axis=-1)


# -----------------------------
# Checkpoints
# -----------------------------
def _atomic_write(path: str, write) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as f:
            write(f)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def save_checkpoint(net: Network, path: str) -> None:
    """npz archive: a JSON header plus one array per parameter/buffer."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "input_shape": list(net.input_shape),
        "num_classes": net.num_classes,
        "layers": [asdict(layer) for layer in net.layers],
    }
    arrays = {"__meta__": np.array(json.dumps(meta))}
    arrays.update({f"param/{k}": v.data for k, v in net.params.items()})
    arrays.update({f"buffer/{k}": v for k, v in net.buffers.items()})
    _atomic_write(path, lambda f: np.savez(f, **arrays))
    logger.info("Saved checkpoint to %s", path)


def load_checkpoint(path: str) -> Network:
    try:
        with np.load(path, allow_pickle=False) as archive:
            meta = json.loads(str(archive["__meta__"]))
            params = {k[len("param/"):]: Tensor(archive[k]) for k in archive.files if k.startswith("param/")}
            buffers = {k[len("buffer/"):]: np.array(archive[k]) for k in archive.files if k.startswith("buffer/")}
    except (OSError, KeyError, ValueError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has version {meta.get('version')}, expected {CHECKPOINT_VERSION}"
        )
    layers = [
        Layer(**{**d, "in_shape": tuple(d["in_shape"]), "out_shape": tuple(d["out_shape"])})
        for d in meta["layers"]
    ]
    return Network(layers, tuple(meta["input_shape"]), int(meta["num_classes"]), params, buffers)


# -----------------------------
# Configured networks
# -----------------------------
@dataclass
class NetworkConfig:
    """Architecture settings.

    Attributes:
        preset: one of PRESETS; ignored when `hidden` is set.
        init: initialization scheme, one of INIT_SCHEMES.
        hidden: widths of a custom ReLU MLP.
        toy_depth, toy_width: depth n and weight w of the "toy" preset.
    """

    preset: str = "mlp-small"
    init: str = "default"
    hidden: Optional[List[int]] = None
    toy_depth: int = 2
    toy_width: float = 1.0

    def validate(self, prefix: str = "network") -> "NetworkConfig":
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {', '.join(PRESETS)}", field=f"{prefix}.preset")
        if self.init not in INIT_SCHEMES:
            raise ConfigError(f"init must be one of {', '.join(INIT_SCHEMES)}", field=f"{prefix}.init")
        if self.hidden is not None and any(h < 1 for h in self.hidden):
            raise ConfigError("hidden widths must be >= 1", field=f"{prefix}.hidden")
        if self.toy_depth < 2:
            raise ConfigError("toy network depth must be >= 2", field=f"{prefix}.toy_depth")
        if self.toy_width < 0:
            raise ConfigError("toy network width parameter w must be >= 0", field=f"{prefix}.toy_width")
        return self


def get_network(config: NetworkConfig, input_shape: Sequence[int], num_classes: int, seed: int = 0) -> Network:
    """Build the configured network for data of `input_shape` with `num_classes` labels."""
    if config.hidden is not None:
        return mlp(input_shape, config.hidden, num_classes, init_scheme=config.init, seed=seed)
    return build_preset(
        config.preset, num_classes, input_shape,
        seed=seed, init_scheme=config.init, depth=config.toy_depth, w=config.toy_width,
    )
