"""Command-line driver: train, attack, eval, bound-check, gradcheck."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import gradsuite
from .attacks import AttackConfig, predict, robust_accuracy, transfer_attack
from .data import (MetricsRecord, build_config, echo_config, load_checkpoint, load_config,
                   load_mnist_dir, parse_pairs, save_checkpoint, write_metrics)
from .lipschitz import REGIMES, bound_experiment

log = logging.getLogger("fpd")


def _seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("FPD_SEED")
    return int(env) if env else 0


def _add_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value (repeatable; wins over the file)")


# ---------------------------------------------------------------- train

def run_train(args) -> int:
    from .arch import build_network, build_substitute
    from .training import adversarial_train, train

    cfg = load_config(args.config, overrides=args.override)
    train_set, _ = load_mnist_dir(args.data, cfg.image_size, cfg.train_limit, cfg.test_limit,
                                  dtype=cfg.dtype)
    ncfg = cfg.net_config(train_set.num_classes)
    net = build_substitute(ncfg, cfg.seed) if cfg.model == "substitute" else build_network(ncfg, cfg.seed)
    history_rows = []

    def on_epoch(stats):
        history_rows.append(dataclasses.asdict(stats))
        print(f"epoch {stats.epoch}: l1={stats.mean_l1:.5f} l2={stats.mean_l2:.6f} "
              f"freeze={stats.freeze_steps} full={stats.full_steps} "
              f"train_acc={stats.train_accuracy:.4f}", flush=True)

    t0 = time.perf_counter()
    if cfg.adversarial == "none":
        train(net, train_set, cfg, on_epoch)
    else:
        adversarial_train(net, train_set, cfg, cfg.attack_config(), on_epoch)
    print(f"trained in {time.perf_counter() - t0:.1f}s")
    save_checkpoint(net, args.out)
    history = args.history or Path(str(args.out) + ".history.csv")
    with open(history, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(history_rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(history_rows)
    print(f"checkpoint: {args.out}\nhistory: {history}")
    return 0


# ---------------------------------------------------------------- attack / eval

def _attack_config(args) -> AttackConfig:
    values = {}
    if args.config is not None:
        values = parse_pairs(args.config.read_text().splitlines(), str(args.config))
    values.update(parse_pairs(args.override, "--override"))
    flags = {"kind": args.attack, "norm": args.norm, "eps": args.eps, "steps": args.steps,
             "step_size": args.step_size, "seed": args.seed}
    values.update({k: str(v) for k, v in flags.items() if v is not None})
    if args.random_init:
        values["random_init"] = "true"
    return build_config(AttackConfig, values)


def _model_id(path: Path, net) -> str:
    return f"{net.config.kind}:{path.stem}"


def _test_set(args, net):
    _, test = load_mnist_dir(args.data, net.config.image_size, train_limit=0,
                             test_limit=args.limit, dtype=net.config.dtype)
    return test


def run_attack(args) -> int:
    cfg = _attack_config(args)
    echo_config(cfg)
    net = load_checkpoint(args.checkpoint)
    test = _test_set(args, net)
    if args.substitute is not None:
        sub = load_checkpoint(args.substitute)
        res = transfer_attack(sub, net, test, cfg, args.batch_size)
        mode = "transfer"
    else:
        res = robust_accuracy(net, test, cfg, args.batch_size)
        mode = "white-box"
    print(f"{mode} {cfg.kind}/{cfg.norm} eps={cfg.eps}: clean={res.clean_accuracy:.4f} "
          f"robust={res.robust_accuracy:.4f} n={res.n_samples} time={res.wall_time_s:.1f}s")
    if args.metrics is not None:
        attack_name = cfg.kind if mode == "white-box" else f"transfer-{cfg.kind}"
        write_metrics([MetricsRecord(_model_id(args.checkpoint, net), attack_name, cfg.norm,
                                     cfg.eps, cfg.steps if cfg.kind == "pgd" else 1,
                                     cfg.step_size if cfg.kind == "pgd" else cfg.eps,
                                     res.robust_accuracy, res.n_samples, res.wall_time_s,
                                     cfg.seed)], args.metrics)
    return 0


def run_eval(args) -> int:
    net = load_checkpoint(args.checkpoint)
    test = _test_set(args, net)
    t0 = time.perf_counter()
    acc = float(np.mean(predict(net, test.images, args.batch_size) == test.labels))
    wall = time.perf_counter() - t0
    print(f"clean accuracy {acc:.4f} on {len(test)} images")
    if args.metrics is not None:
        write_metrics([MetricsRecord(_model_id(args.checkpoint, net), "none", "none", 0.0, 0, 0.0,
                                     acc, len(test), wall, _seed(args.seed))], args.metrics)
    return 0


# ---------------------------------------------------------------- bound-check / gradcheck

def run_bound_check(args) -> int:
    seed = _seed(args.seed)
    dims = tuple(int(d) for d in args.dims.split(","))
    print(f"# resolved bound-check\ntrials = {args.trials}\nseed = {seed}\ndims = {dims}\n"
          f"activation = {args.activation}\nnoise_eps = {args.noise_eps}\n"
          f"regime = {args.regime}\nsqueezed = {args.squeezed}")
    exp = bound_experiment(args.trials, dims, args.activation, args.noise_eps, args.regime, seed,
                           args.squeezed)
    if args.out is not None:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["trial", "eta", "max_measured", "max_bound", "violated", "max_violation"])
            for t in exp.trials:
                w.writerow([t.trial, repr(t.eta), repr(t.max_measured), repr(t.max_bound),
                            int(t.violated), repr(t.max_violation)])
    print(f"violations: {exp.violation_count}/{args.trials} (max excess {exp.max_violation:.3e})")
    for t in exp.findings[:20]:
        print(f"  trial {t.trial}: eta={t.eta:.6f} measured={t.max_measured:.6e} "
              f"bound={t.max_bound:.6e}")
    return 0


def run_gradcheck(args) -> int:
    seeds = tuple(range(args.seeds))
    print(f"# resolved gradcheck\nseeds = {args.seeds}\nonly = {args.only}")
    results = gradsuite.run_suite(seeds, set(args.only) if args.only else None)
    if not results:
        print(f"no checks match {args.only}", file=sys.stderr)
        return 2
    print(gradsuite.format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fpd", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network and write a checkpoint")
    _add_config(p)
    p.add_argument("--data", type=Path, required=True, help="directory with MNIST IDX files")
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--history", type=Path, help="per-epoch CSV (default: <out>.history.csv)")
    p.set_defaults(func=run_train)

    for name, func in (("attack", run_attack), ("eval", run_eval)):
        p = sub.add_parser(name, help=f"{name} a checkpoint on the test split")
        p.add_argument("--checkpoint", type=Path, required=True)
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--metrics", type=Path, help="append a row to this CSV")
        p.add_argument("--limit", type=int, default=1000, help="number of test images")
        p.add_argument("--batch-size", type=int, default=100)
        p.add_argument("--seed", type=int)
        p.set_defaults(func=func)
        if name == "attack":
            _add_config(p)
            p.add_argument("--attack", choices=("fgsm", "pgd"))
            p.add_argument("--norm", choices=("linf", "l2"))
            p.add_argument("--eps", type=float)
            p.add_argument("--steps", type=int)
            p.add_argument("--step-size", type=float)
            p.add_argument("--random-init", action="store_true")
            p.add_argument("--substitute", type=Path, help="substitute checkpoint (transfer mode)")

    p = sub.add_parser("bound-check", help="randomized test of the output-variation bound")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int)
    p.add_argument("--regime", choices=REGIMES, default=REGIMES[0])
    p.add_argument("--dims", default="4,8,5", help="comma-separated layer widths")
    p.add_argument("--activation", choices=("elu", "relu", "tanh"), default="elu")
    p.add_argument("--noise-eps", type=float, default=0.3)
    p.add_argument("--squeezed", action="store_true", help="Tanh before the softmax")
    p.add_argument("--out", type=Path, help="per-trial CSV")
    p.set_defaults(func=run_bound_check)

    p = sub.add_parser("gradcheck", help="finite-difference check of every operation")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--only", nargs="*", help="run only these named checks")
    p.set_defaults(func=run_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, FloatingPointError, OverflowError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
