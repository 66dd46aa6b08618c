"""Shared fixtures: random small networks and a finite-difference gradient check."""

from __future__ import annotations

import json
from typing import Callable, Dict, List, Optional

import hypothesis.strategies as st
import numpy as np
import pytest

from network import Layer, Network, build_network, mlp

FD_STEP = 1e-5

collect_ignore = ["examples"]


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running suite or MNIST demonstration")


def random_net(
    seed: int,
    d: int = 3,
    k: int = 3,
    hidden: Optional[List[int]] = None,
    activation: bool = True,
    init_scheme: str = "default",
    max_width: int = 8,
    max_hidden: int = 3,
) -> Network:
    """MLP with 1..max_hidden hidden layers of width 2..max_width unless `hidden` is given."""
    rng = np.random.default_rng(seed)
    if hidden is None:
        hidden = [int(w) for w in rng.integers(2, max_width + 1, size=int(rng.integers(1, max_hidden + 1)))]
    return mlp((d,), hidden, k, activation=activation, init_scheme=init_scheme, seed=seed)


def affine_net(weights: List[np.ndarray], biases: List[np.ndarray], relu: bool = True) -> Network:
    """Network with hand-set affine layers (ReLU between them when relu=True)."""
    layers = []
    for i, w in enumerate(weights):
        layers.append(Layer("affine", out=w.shape[0]))
        if relu and i < len(weights) - 1:
            layers.append(Layer("relu"))
    net = build_network((weights[0].shape[1],), layers, weights[-1].shape[0])
    affine_ids = [i for i, layer in enumerate(net.layers) if layer.kind == "affine"]
    updates: Dict[str, np.ndarray] = {}
    for i, w, b in zip(affine_ids, weights, biases):
        updates[f"{i}.weight"] = np.asarray(w, dtype=np.float64)
        updates[f"{i}.bias"] = np.asarray(b, dtype=np.float64)
    return net.with_params(updates)


def check_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, analytic: np.ndarray, rel: float = 1e-4, atol: float = 1e-6) -> int:
    """Compare `analytic` with central differences of f at x.

    A mismatch is tolerated only when a ReLU or |.| kink inside the step
    explains it: the one-sided differences then disagree by at least twice
    the central-difference error. Returns the number of coordinates that
    matched outright.
    """
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.asarray(analytic, dtype=np.float64).reshape(-1)
    f0 = f(x)
    matched = 0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + FD_STEP
        f_plus = f(x)
        flat[i] = orig - FD_STEP
        f_minus = f(x)
        flat[i] = orig
        central = (f_plus - f_minus) / (2 * FD_STEP)
        err = abs(central - grad[i])
        if err <= rel * max(abs(central), abs(grad[i])) + atol:
            matched += 1
            continue
        kink = abs((f_plus - f0) / FD_STEP - (f0 - f_minus) / FD_STEP)
        assert kink >= err, f"coordinate {i}: autodiff {grad[i]!r} vs finite difference {central!r}"
    return matched


@st.composite
def small_arrays(draw, shape, low: float = -2.0, high: float = 2.0):
    seed = draw(st.integers(min_value=0, max_value=2**32 - 1))
    return np.random.default_rng(seed).uniform(low, high, size=shape)


@pytest.fixture
def blobs_config(tmp_path):
    """Path of a small, fast run configuration on synthetic blobs."""

    def write(**sections) -> str:
        doc = {
            "seed": 0,
            "data": {"source": "blobs", "classes": 3, "n_per_class": 20, "dims": 2, "spread": 0.05},
            "network": {"hidden": [8]},
            "attack": {"kind": "fgsm", "eps": 0.05},
            "loss": {"family": "forwabs", "lambda": 0.0},
            "train": {"schedule": "cyclic", "epochs": 2, "batch_size": 16},
            "eval": {"steps": 2, "restarts": 1},
        }
        for name, values in sections.items():
            doc.setdefault(name, {}).update(values)
        path = tmp_path / "config.json"
        path.write_text(json.dumps(doc))
        return str(path)

    return write
