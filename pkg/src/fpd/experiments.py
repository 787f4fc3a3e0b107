"""Desk-scale experiments: MNIST training runs and the FPD-vs-plain robustness study."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from .arch import build_network
from .attacks import AttackConfig, predict, robust_accuracy
from .data import Dataset, load_mnist_dir
from .training import EpochStats, TrainConfig, train

DEFAULT_DATA = Path(__file__).resolve().parents[2] / "data" / "mnist"
STUDY_ATTACK = AttackConfig("pgd", "linf", eps=0.1, steps=10, step_size=0.02)


def desk_data(directory=None, cfg: TrainConfig | None = None) -> tuple[Dataset, Dataset]:
    cfg = cfg or TrainConfig()
    d = Path(directory) if directory is not None else DEFAULT_DATA
    if not d.is_dir():
        raise FileNotFoundError(f"{d} missing; run scripts/prepare_mnist.py first")
    return load_mnist_dir(d, cfg.image_size, cfg.train_limit, cfg.test_limit, dtype=cfg.dtype)


@dataclass
class Run:
    kind: str
    seed: int
    net: object
    history: list[EpochStats]
    train_seconds: float
    test_accuracy: float

    @property
    def l2_curve(self) -> list[float]:
        return [h.mean_l2 for h in self.history]

    def crossed_threshold(self, t: float) -> bool:
        """Epoch-mean restoration loss starts above ``t`` and ends at or below it."""
        c = self.l2_curve
        return bool(c) and c[0] > t and min(c) <= t


def train_run(kind: str, seed: int, train_set: Dataset, test_set: Dataset,
              cfg: TrainConfig | None = None, on_epoch=None) -> Run:
    cfg = replace(cfg or TrainConfig(), seed=seed, model=kind)
    net = build_network(cfg.net_config(train_set.num_classes), seed)
    t0 = time.perf_counter()
    _, history = train(net, train_set, cfg, on_epoch)
    secs = time.perf_counter() - t0
    acc = float((predict(net, test_set.images) == test_set.labels).mean())
    return Run(kind, seed, net, history, secs, acc)


@dataclass
class StudyRow:
    kind: str
    seed: int
    clean_accuracy: float
    robust_accuracy: float
    attack_seconds: float


@dataclass
class Study:
    rows: list[StudyRow] = field(default_factory=list)

    def median(self, kind: str) -> float:
        return statistics.median(r.robust_accuracy for r in self.rows if r.kind == kind)

    def table(self) -> str:
        lines = [f"{'model':<6} {'seed':>4} {'clean':>7} {'robust':>7} {'attack s':>9}"]
        for r in self.rows:
            lines.append(f"{r.kind:<6} {r.seed:>4} {r.clean_accuracy:7.4f} {r.robust_accuracy:7.4f} "
                         f"{r.attack_seconds:9.1f}")
        for kind in sorted({r.kind for r in self.rows}):
            lines.append(f"median robust accuracy {kind}: {self.median(kind):.4f}")
        return "\n".join(lines)


def evaluate(run: Run, test_set: Dataset, attack: AttackConfig = STUDY_ATTACK) -> StudyRow:
    res = robust_accuracy(run.net, test_set, attack)
    return StudyRow(run.kind, run.seed, res.clean_accuracy, res.robust_accuracy, res.wall_time_s)
