"""
Command-line entry point.

  python main.py train     --config run_config.json [--set loss.alpha=0.3 ...]
  python main.py eval      --config run_config.json --checkpoint runs/model.npz
  python main.py certify   --config run_config.json --checkpoint runs/model.npz --eps 0.1
  python main.py attack    --config run_config.json --checkpoint runs/model.npz --set attack.kind=pgd
  python main.py toy-sweep --depths 2,6,10,14,18 --w 0,0.25,0.5,0.75,1 --families mtl-ibp,exp-ibp --alphas 0.01,0.1
  python main.py toy-sweep --families forwabs --lambdas 0.1,1,10
  python main.py co-probe  --metrics runs/metrics.csv

Exit codes: 0 success, 1 configuration or checkpoint error, 2 non-finite
bounds or loss, 3 data file or I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from typing import List, Optional

import numpy as np
from dotenv import load_dotenv

from attacks import attack
from bounds import ibp_bounds, min_margin
from config import RunConfig, dump_config, load_config
from data_io import Dataset, derive_rng, get_dataset
from errors import ConfigError, IbpLabError
from network import _atomic_write, forward, get_network, load_checkpoint, save_checkpoint
from training import co_probe, evaluate, read_metrics, sweep_csv, toy_sweep, train, write_metrics

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_IO = 3


# -----------------------------
# Helpers
# -----------------------------
def _write_text(path: str, text: str) -> None:
    payload = text.encode("utf-8")
    _atomic_write(path, lambda f: f.write(payload))


def _output_dir(args: argparse.Namespace, cfg: Optional[RunConfig] = None) -> str:
    configured = cfg.output.dir if cfg is not None else None
    return args.output or configured or os.getenv("IBPLAB_OUTPUT_DIR") or "runs"


def _floats(text: str) -> List[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _prepare(args: argparse.Namespace):
    """Parse the config, write the resolved dump, load the data."""
    cfg = load_config(args.config, args.set or [])
    out = _output_dir(args, cfg)
    _write_text(os.path.join(out, "resolved_config.json"), dump_config(cfg))
    data = get_dataset(cfg.data, cfg.seed)
    return cfg, out, data


def _split(data: Dataset, name: Optional[str]):
    if name is None:
        return data.heldout()
    if name not in ("train", "val", "test"):
        raise ConfigError(f"unknown split '{name}'", field="--split")
    return (name,) + data.part(name)


def _checkpoint(path: str, data: Dataset):
    net = load_checkpoint(path)
    if net.input_shape != data.input_shape or net.num_classes != data.num_classes:
        raise ConfigError(
            f"checkpoint {path} expects inputs {net.input_shape} with {net.num_classes} classes, "
            f"data has {data.input_shape} with {data.num_classes}"
        )
    return net


# -----------------------------
# Commands
# -----------------------------
def cmd_train(args: argparse.Namespace) -> int:
    cfg, out, data = _prepare(args)
    net = get_network(cfg.network, data.input_shape, data.num_classes, cfg.seed)
    net, history = train(
        net, data, cfg.train, cfg.loss,
        eval_cfg=cfg.eval, record_wall_time=cfg.output.record_wall_time,
    )
    save_checkpoint(net, os.path.join(out, "model.npz"))
    write_metrics(os.path.join(out, "metrics.csv"), history)
    if history:
        last = history[-1]
        print(f"epoch {last.epoch}: clean {last.clean_acc:.4f} pgd {last.pgd_acc:.4f} ibp-cert {last.ibp_cert_acc:.4f}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg, out, data = _prepare(args)
    net = _checkpoint(args.checkpoint, data)
    split_name, x, y = _split(data, args.split)
    if cfg.eval.limit is not None:
        x, y = x[: cfg.eval.limit], y[: cfg.eval.limit]
    eps = args.eps if args.eps is not None else (cfg.eval.eps if cfg.eval.eps is not None else cfg.loss.eps)
    metrics = evaluate(
        net, x, y, eps, cfg.eval.attack_config(eps, cfg.attack.clip_input, cfg.seed),
        rng=derive_rng(cfg.seed, "eval"), batch_size=cfg.eval.batch_size,
    )
    write_metrics(os.path.join(out, "eval_metrics.csv"), [metrics])
    print(f"{split_name}: clean {metrics.clean_acc:.4f} pgd {metrics.pgd_acc:.4f} ibp-cert {metrics.ibp_cert_acc:.4f} (eps {eps:g})")
    return EXIT_OK


def cmd_certify(args: argparse.Namespace) -> int:
    cfg, out, data = _prepare(args)
    net = _checkpoint(args.checkpoint, data)
    split_name, x, y = _split(data, args.split)
    eps = args.eps if args.eps is not None else cfg.loss.eps
    if eps < 0:
        raise ConfigError("eps must be >= 0", field="--eps")

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["index", "label", "predicted", "certified", "min_lower_bound"])
    certified_correct = 0
    for start in range(0, len(y), cfg.eval.batch_size):
        xb, yb = x[start:start + cfg.eval.batch_size], y[start:start + cfg.eval.batch_size]
        pred = np.argmax(forward(net, xb, "eval").data, axis=1)
        margin = min_margin(ibp_bounds(net, xb, yb, eps, clip_input=cfg.attack.clip_input), yb)
        for offset, (label, p, m) in enumerate(zip(yb, pred, margin)):
            ok = bool(m >= 0.0)
            certified_correct += int(ok and p == label)
            writer.writerow([start + offset, int(label), int(p), str(ok).lower(), format(float(m), ".17g")])
    _write_text(os.path.join(out, "certify.csv"), buf.getvalue())
    total = len(y)
    accuracy = certified_correct / total if total else 0.0
    print(f"certified accuracy on {split_name} at eps {eps:g}: {accuracy:.4f} ({certified_correct}/{total})")
    return EXIT_OK


def cmd_attack(args: argparse.Namespace) -> int:
    cfg, out, data = _prepare(args)
    net = _checkpoint(args.checkpoint, data)
    split_name, x, y = _split(data, args.split)
    rng = derive_rng(cfg.seed, "attack-cmd")

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["index", "label", "clean_pred", "adv_pred", "in_ball"])
    robust = 0
    for start in range(0, len(y), cfg.eval.batch_size):
        xb, yb = x[start:start + cfg.eval.batch_size], y[start:start + cfg.eval.batch_size]
        clean = np.argmax(forward(net, xb, "eval").data, axis=1)
        adv = attack(net, xb, yb, cfg.attack, mode="eval", rng=rng)
        adv_pred = np.argmax(forward(net, adv.x_adv, "eval").data, axis=1)
        robust += int(np.sum((clean == yb) & (adv_pred == yb)))
        for offset in range(len(yb)):
            writer.writerow([
                start + offset, int(yb[offset]), int(clean[offset]), int(adv_pred[offset]),
                str(bool(adv.in_ball[offset])).lower(),
            ])
    _write_text(os.path.join(out, "attack.csv"), buf.getvalue())
    total = len(y)
    print(f"{cfg.attack.kind} robust accuracy on {split_name} at eps {cfg.attack.eps:g}: "
          f"{robust / total if total else 0.0:.4f} ({robust}/{total})")
    return EXIT_OK


def cmd_toy_sweep(args: argparse.Namespace) -> int:
    depths = [int(d) for d in _floats(args.depths)]
    families = [f.strip() for f in args.families.split(",") if f.strip()]
    alphas, lambdas = _floats(args.alphas), _floats(args.lambdas)
    grids = {family: lambdas if family == "forwabs" else alphas for family in families}
    rows = toy_sweep(depths, _floats(args.w), grids)
    path = os.path.join(_output_dir(args), "toy_sweep.csv")
    _write_text(path, sweep_csv(rows))
    print(f"wrote {len(rows)} rows to {path}")
    return EXIT_OK


def cmd_co_probe(args: argparse.Namespace) -> int:
    try:
        history = read_metrics(args.metrics)
    except OSError as e:
        logger.error("Cannot read %s: %s", args.metrics, e)
        return EXIT_IO
    verdict = co_probe(
        history,
        pgd_threshold=args.pgd_threshold,
        attack_threshold=args.attack_threshold,
        window=args.window,
    )
    if verdict.flagged:
        print(f"catastrophic overfitting detected at epoch {verdict.onset_epoch}")
    else:
        print("no catastrophic overfitting detected")
    return EXIT_OK


# -----------------------------
# Argument parsing
# -----------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ibplab", description="IBP, expressive losses and ForwAbs on a small autodiff engine.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbs = parser.add_subparsers(dest="verb", required=True)

    def with_config(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config field (repeatable)")
        p.add_argument("--output", help="output directory (default: output.dir, $IBPLAB_OUTPUT_DIR, runs/)")

    def with_checkpoint(p: argparse.ArgumentParser) -> None:
        p.add_argument("--checkpoint", required=True, help="model.npz written by train")
        p.add_argument("--split", choices=("train", "val", "test"), help="default: val, else test, else train")

    p = verbs.add_parser("train", help="train a network")
    with_config(p)
    p.set_defaults(func=cmd_train)

    p = verbs.add_parser("eval", help="clean / PGD / IBP-certified accuracy of a checkpoint")
    with_config(p)
    with_checkpoint(p)
    p.add_argument("--eps", type=float)
    p.set_defaults(func=cmd_eval)

    p = verbs.add_parser("certify", help="per-sample IBP verdicts")
    with_config(p)
    with_checkpoint(p)
    p.add_argument("--eps", type=float, help="default: the loss bounding radius")
    p.set_defaults(func=cmd_certify)

    p = verbs.add_parser("attack", help="per-sample attack outcomes")
    with_config(p)
    with_checkpoint(p)
    p.set_defaults(func=cmd_attack)

    p = verbs.add_parser("toy-sweep", help="loss of each family on the toy networks")
    p.add_argument("--depths", default="2,6,10,14,18")
    p.add_argument("--w", default="0,0.25,0.5,0.75,1")
    p.add_argument("--families", default="mtl-ibp,exp-ibp,cc-ibp,sabr")
    p.add_argument("--alphas", default="0.01,0.1", help="alpha grid of the expressive families")
    p.add_argument("--lambdas", default="0.01,0.1", help="lambda grid of forwabs")
    p.add_argument("--output", help="output directory")
    p.set_defaults(func=cmd_toy_sweep)

    p = verbs.add_parser("co-probe", help="catastrophic-overfitting verdict for a metrics CSV")
    p.add_argument("--metrics", required=True)
    p.add_argument("--pgd-threshold", type=float, default=0.05)
    p.add_argument("--attack-threshold", type=float, default=0.6)
    p.add_argument("--window", type=int, default=1)
    p.set_defaults(func=cmd_co_probe)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except IbpLabError as e:
        logger.error("%s", e)
        return e.exit_code
    except OSError as e:
        logger.error("I/O error: %s", e)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
