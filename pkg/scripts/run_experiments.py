#!/usr/bin/env python3
"""Train FPD and plain backbones on the desk MNIST split and compare PGD robustness.

    python scripts/run_experiments.py --seeds 0 1 2 --out results/study.csv
"""

import argparse
import csv
import dataclasses
from pathlib import Path

from fpd.attacks import AttackConfig
from fpd.experiments import DEFAULT_DATA, STUDY_ATTACK, Study, desk_data, evaluate, train_run
from fpd.training import TrainConfig


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--data", type=Path, default=DEFAULT_DATA)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--kinds", nargs="+", default=["fpd", "plain"], choices=["fpd", "plain"])
    ap.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    ap.add_argument("--eps", type=float, default=STUDY_ATTACK.eps)
    ap.add_argument("--steps", type=int, default=STUDY_ATTACK.steps)
    ap.add_argument("--step-size", type=float, default=STUDY_ATTACK.step_size)
    ap.add_argument("--out", type=Path, help="write one CSV row per (model, seed)")
    args = ap.parse_args()

    cfg = TrainConfig(epochs=args.epochs)
    attack = AttackConfig("pgd", "linf", args.eps, args.steps, args.step_size)
    train_set, test_set = desk_data(args.data, cfg)
    print(f"train {len(train_set)} / test {len(test_set)}; attack {attack}")

    study = Study()
    for seed in args.seeds:
        for kind in args.kinds:
            run = train_run(kind, seed, train_set, test_set, cfg,
                            on_epoch=lambda s, k=kind: print(
                                f"  {k} epoch {s.epoch}: l1={s.mean_l1:.4f} l2={s.mean_l2:.5f} "
                                f"acc={s.train_accuracy:.4f}", flush=True))
            print(f"{kind} seed {seed}: clean {run.test_accuracy:.4f} in {run.train_seconds:.0f}s"
                  + (f", l2 crossed {cfg.threshold_t}: {run.crossed_threshold(cfg.threshold_t)}"
                     if kind == "fpd" else ""), flush=True)
            study.rows.append(evaluate(run, test_set, attack))
    print(study.table())

    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w", newline="") as fh:
            fields = [f.name for f in dataclasses.fields(study.rows[0])]
            w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
            w.writeheader()
            w.writerows(dataclasses.asdict(r) for r in study.rows)


if __name__ == "__main__":
    main()
