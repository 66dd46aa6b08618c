"""
Run configuration: one JSON document with the sections

  seed     top-level integer; every component derives its randomness from it
  data     DataConfig    (data_io.py)
  network  NetworkConfig (network.py)
  attack   AttackConfig  (attacks.py)
  loss     family, alpha, lambda, bounding_eps, l1 (LossSpec in losses.py)
  train    TrainPlan     (training.py)
  eval     EvalConfig    (training.py)
  output   OutputConfig

Only `data.source` and `loss.family` are required. Overrides of the form
`section.key=value` (value parsed as JSON, else taken as a string) are
applied to the document before validation, so they show up in the resolved
dump.

Usage example:
  cfg = parse_config(open("run_config.json").read(), ["loss.alpha=0.3"])
  print(dump_config(cfg))
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, fields
from typing import Any, Dict, Iterable, Optional

from attacks import AttackConfig
from data_io import DataConfig
from errors import ConfigError
from losses import LossSpec
from network import NetworkConfig
from training import EvalConfig, TrainPlan

logger = logging.getLogger(__name__)


@dataclass
class OutputConfig:
    """Attributes:
        dir: output directory; None falls back to --output, then IBPLAB_OUTPUT_DIR, then runs/.
        record_wall_time: write measured epoch times into the metrics CSV (else 0).
    """

    dir: Optional[str] = None
    record_wall_time: bool = False

    def validate(self, prefix: str = "output") -> "OutputConfig":
        return self


@dataclass
class RunConfig:
    data: DataConfig
    loss: LossSpec
    seed: int = 0
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainPlan = field(default_factory=TrainPlan)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    @property
    def attack(self) -> AttackConfig:
        return self.loss.attack


SECTIONS = {
    "data": DataConfig,
    "network": NetworkConfig,
    "attack": AttackConfig,
    "loss": LossSpec,
    "train": TrainPlan,
    "eval": EvalConfig,
    "output": OutputConfig,
}
REQUIRED = {"data": ("source",), "loss": ("family",)}
# dataclass field -> document key, where they differ
RENAMED = {"loss": {"lam": "lambda"}}
# fields filled from elsewhere in the document, never set directly
DERIVED = {"attack": ("seed",), "loss": ("attack",), "train": ("seed",)}


# -----------------------------
# Field coercion
# -----------------------------
def _coerce(value: Any, annotation: str, path: str) -> Any:
    if annotation.startswith("Optional["):
        return None if value is None else _coerce(value, annotation[len("Optional["):-1], path)
    if value is None:
        raise ConfigError("must not be null", field=path)
    if annotation.startswith("List["):
        if not isinstance(value, list):
            raise ConfigError("must be a list", field=path)
        inner = annotation[len("List["):-1]
        return [_coerce(v, inner, f"{path}[{i}]") for i, v in enumerate(value)]
    if annotation == "bool":
        if not isinstance(value, bool):
            raise ConfigError("must be true or false", field=path)
        return value
    if annotation == "int":
        if isinstance(value, bool) or not (isinstance(value, int) or (isinstance(value, float) and value.is_integer())):
            raise ConfigError("must be an integer", field=path)
        return int(value)
    if annotation == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError("must be a number", field=path)
        return float(value)
    if annotation == "str":
        if not isinstance(value, str):
            raise ConfigError("must be a string", field=path)
        return value
    raise ConfigError(f"unsupported field type {annotation}", field=path)


def _section_fields(name: str) -> Dict[str, Any]:
    """Document key -> dataclass field for one section."""
    renamed = RENAMED.get(name, {})
    skipped = DERIVED.get(name, ())
    return {renamed.get(f.name, f.name): f for f in fields(SECTIONS[name]) if f.name not in skipped}


def _build_section(name: str, raw: Any) -> Dict[str, Any]:
    if not isinstance(raw, dict):
        raise ConfigError("section must be an object", field=name)
    known = _section_fields(name)
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown key '{name}.{key}'", field=f"{name}.{key}")
    for key in REQUIRED.get(name, ()):
        if key not in raw:
            raise ConfigError("is required", field=f"{name}.{key}")
    return {known[key].name: _coerce(value, str(known[key].type), f"{name}.{key}") for key, value in raw.items()}


# -----------------------------
# Overrides
# -----------------------------
def parse_override(text: str):
    """'section.key=value' -> (['section', 'key'], value)."""
    if "=" not in text:
        raise ConfigError(f"override '{text}' is not of the form section.key=value")
    path, raw = text.split("=", 1)
    keys = path.strip().split(".")
    if not all(keys) or len(keys) > 2:
        raise ConfigError(f"override path '{path}' must be 'seed' or 'section.key'")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return keys, value


def apply_overrides(document: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """Copy of `document` with each override applied in order."""
    doc = json.loads(json.dumps(document))
    for text in overrides:
        keys, value = parse_override(text)
        if len(keys) == 1:
            doc[keys[0]] = value
            continue
        section = doc.setdefault(keys[0], {})
        if not isinstance(section, dict):
            raise ConfigError("section must be an object", field=keys[0])
        section[keys[1]] = value
        logger.debug("override %s = %r", ".".join(keys), value)
    return doc


# -----------------------------
# Parsing and dumping
# -----------------------------
def from_document(doc: Any) -> RunConfig:
    """Validated RunConfig from an already-decoded document."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    for key in doc:
        if key != "seed" and key not in SECTIONS:
            raise ConfigError(f"unknown key '{key}'", field=key)
    for name in REQUIRED:
        if name not in doc:
            raise ConfigError("section is required", field=name)
    seed = _coerce(doc.get("seed", 0), "int", "seed")
    parts = {name: _build_section(name, doc.get(name, {})) for name in SECTIONS}

    attack = AttackConfig(**parts["attack"], seed=seed).validate("attack")
    loss = LossSpec(**parts["loss"], attack=attack).validate("loss")
    cfg = RunConfig(
        data=DataConfig(**parts["data"]).validate("data"),
        loss=loss,
        seed=seed,
        network=NetworkConfig(**parts["network"]).validate("network"),
        train=TrainPlan(**parts["train"], seed=seed).validate("train").resolve(loss.family).validate("train"),
        eval=EvalConfig(**parts["eval"]).validate("eval"),
        output=OutputConfig(**parts["output"]).validate("output"),
    )
    return cfg


def parse_config(text: str, overrides: Iterable[str] = ()) -> RunConfig:
    """Parse JSON text, apply overrides, fill defaults and validate every field."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(e.msg, line=e.lineno) from None
    return from_document(apply_overrides(doc, overrides) if overrides else doc)


def load_config(path: str, overrides: Iterable[str] = ()) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text, overrides)


def to_document(cfg: RunConfig) -> Dict[str, Any]:
    doc: Dict[str, Any] = {"seed": cfg.seed}
    sources = {
        "data": cfg.data, "network": cfg.network, "attack": cfg.attack, "loss": cfg.loss,
        "train": cfg.train, "eval": cfg.eval, "output": cfg.output,
    }
    for name, obj in sources.items():
        doc[name] = {key: getattr(obj, f.name) for key, f in _section_fields(name).items()}
    return json.loads(json.dumps(doc))


def dump_config(cfg: RunConfig) -> str:
    """Resolved document (every field, sorted keys); parses back to an equal RunConfig."""
    return json.dumps(to_document(cfg), indent=2, sort_keys=True) + "\n"
