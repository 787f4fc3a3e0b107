"""Two-phase multi-task training with eps-neighbourhood noise.

Each batch is perturbed with uniform noise in [-eps, eps], pushed through the
network, and scored by the restoration L2 loss against the clean image.
While that loss is above the threshold T only the front module and the
restoration decoder are updated (on alpha2 * l2).  Below T the whole
network is updated on alpha1 * CE + alpha2 * l2, and then again on the same
objective evaluated on the network's own restoration fed back as input.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable

import numpy as np

from . import tensor as T
from .arch import FCConfig, FPDNetwork, NetConfig, fpd_forward
from .attacks import AttackConfig, attack
from .tensor import Tensor

log = logging.getLogger(__name__)

FREEZE_TAGS = frozenset({"FD", "R"})


@dataclass(frozen=True)
class TrainConfig:
    alpha1: float = 1.0
    alpha2: float = 1.0
    eps: float = 0.3
    threshold_t: float = 0.01
    lr: float = 1e-3
    wd: float = 0.0
    epochs: int = 10
    seed: int = 0
    batch_size: int = 32
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    momentum: float = 0.0
    eval_delta: float | None = None
    # run-level keys
    model: str = "fpd"  # fpd | plain | substitute
    image_size: int = 32
    dtype: str = "float32"
    train_limit: int = 4000
    test_limit: int = 1000
    adversarial: str = "none"  # none | fgsm | pgd
    attack_norm: str = "linf"
    attack_eps: float = 0.3
    attack_steps: int = 100
    attack_step_size: float = 0.01
    attack_random_init: bool = False

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        if self.threshold_t <= 0:
            raise ValueError("threshold_t must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.model not in ("fpd", "plain", "substitute"):
            raise ValueError(f"model must be fpd, plain or substitute, got {self.model!r}")
        if self.adversarial not in ("none", "fgsm", "pgd"):
            raise ValueError(f"adversarial must be none, fgsm or pgd, got {self.adversarial!r}")
        if self.adversarial != "none":
            self.attack_config()

    def attack_config(self) -> AttackConfig:
        kind = "pgd" if self.adversarial == "none" else self.adversarial
        return AttackConfig(kind, self.attack_norm, self.attack_eps, self.attack_steps,
                            self.attack_step_size, self.attack_random_init, self.seed)

    def net_config(self, num_classes: int = 10):
        if self.model == "substitute":
            return FCConfig(image_size=self.image_size, num_classes=num_classes, dtype=self.dtype)
        return NetConfig(kind=self.model, image_size=self.image_size, num_classes=num_classes,
                         dtype=self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)

    @property
    def step(self) -> int:
        return max(self.steps.values(), default=0)


@dataclass
class PhaseOptimizers:
    """One optimizer state per update kind.

    ``restore`` drives the restoration-only updates (front module and
    decoder on the L2 loss); ``joint`` drives the whole-network updates.
    Sharing a single Adam state lets the much larger cross-entropy gradients
    inflate the second moments of the decoder and front module, which stalls
    restoration for hundreds of steps after every joint update.
    """

    restore: OptimizerState = field(default_factory=OptimizerState)
    joint: OptimizerState = field(default_factory=OptimizerState)

    @classmethod
    def shared(cls) -> PhaseOptimizers:
        st = OptimizerState()
        return cls(st, st)


def optimizer_step(groups, state: OptimizerState, cfg: TrainConfig,
                   allow_tags: frozenset[str] | set[str] | None = None) -> int:
    """Update parameters whose tags meet ``allow_tags`` (None = all), then zero every grad.

    ``groups`` is ``net.param_groups()``: (name, tags, tensor) with shared
    storage listed once.  Weight decay is decoupled: ``lr * wd * theta``.
    Returns the number of tensors updated.
    """
    updated = 0
    with T.no_grad():
        for name, tags, p in groups:
            if allow_tags is not None and not (tags & allow_tags):
                continue
            if p.grad is None:
                raise ValueError(f"parameter {name} has no gradient")
            g = p.grad
            decay = cfg.lr * cfg.wd * p.data if cfg.wd else None
            if cfg.optimizer == "adam":
                t = state.steps.get(name, 0) + 1
                m = state.m.get(name)
                v = state.v.get(name)
                if m is None:
                    m = np.zeros_like(p.data)
                    v = np.zeros_like(p.data)
                m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
                v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
                state.m[name], state.v[name], state.steps[name] = m, v, t
                mhat = m / (1.0 - cfg.beta1 ** t)
                vhat = v / (1.0 - cfg.beta2 ** t)
                p.data -= (cfg.lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)).astype(p.dtype)
            else:
                if cfg.momentum:
                    buf = state.m.get(name)
                    buf = g.copy() if buf is None else cfg.momentum * buf + g
                    state.m[name] = buf
                    g = buf
                state.steps[name] = state.steps.get(name, 0) + 1
                p.data -= (cfg.lr * g).astype(p.dtype)
            if decay is not None:
                p.data -= decay.astype(p.dtype)
            updated += 1
    for _, _, p in groups:
        p.grad = None
    return updated


# ---------------------------------------------------------------- two-phase step

def sample_noise(shape, eps: float, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    if eps < 0:
        raise ValueError("eps must be >= 0")
    return rng.uniform(-eps, eps, size=shape).astype(dtype)


def perturb(x_clean: np.ndarray, eps: float, rng: np.random.Generator) -> np.ndarray:
    return np.clip(x_clean + sample_noise(x_clean.shape, eps, rng, x_clean.dtype), 0.0, 1.0)


@dataclass
class StepResult:
    l1: float
    l2: float
    phase: str  # freeze | full
    objectives: list[float]
    correct: int = 0
    second: tuple[float, float] | None = None  # (l1, l2) of the re-fed pass

    @property
    def updates(self) -> int:
        return len(self.objectives)


def two_phase_step(net: FPDNetwork, x_clean: np.ndarray, y: np.ndarray, cfg: TrainConfig,
                   opt: PhaseOptimizers, x_input: np.ndarray | None = None,
                   rng: np.random.Generator | None = None) -> StepResult:
    """One batch of the two-phase procedure.

    ``x_input`` is the perturbed batch; when omitted it is drawn from
    ``rng`` as clean + uniform noise in [-eps, eps], clipped to [0, 1].
    """
    if x_input is None:
        if rng is None:
            raise ValueError("need either x_input or rng")
        x_input = perturb(x_clean, cfg.eps, rng)
    groups = net.param_groups()
    clean = Tensor(x_clean)
    out1 = fpd_forward(Tensor(x_input), net)
    l2 = T.l2_loss(clean, out1.restored)
    l1 = T.cross_entropy(out1.logits, y)
    correct = int(np.sum(np.argmax(out1.logits.data, axis=-1) == y))
    l1v, l2v = float(l1.data), float(l2.data)
    if l2v > cfg.threshold_t:
        loss = l2 * cfg.alpha2
        T.backward(loss)
        optimizer_step(groups, opt.restore, cfg, FREEZE_TAGS)
        return StepResult(l1v, l2v, "freeze", [float(loss.data)], correct)

    loss1 = l1 * cfg.alpha1 + l2 * cfg.alpha2
    T.backward(loss1)
    optimizer_step(groups, opt.joint, cfg)
    # the restoration is fed back as a fresh input; no gradient through pass one
    out2 = fpd_forward(Tensor(out1.restored.data), net)
    l2b = T.l2_loss(clean, out2.restored)
    l1b = T.cross_entropy(out2.logits, y)
    loss2 = l1b * cfg.alpha1 + l2b * cfg.alpha2
    T.backward(loss2)
    optimizer_step(groups, opt.joint, cfg)
    return StepResult(l1v, l2v, "full", [float(loss1.data), float(loss2.data)], correct,
                      (float(l1b.data), float(l2b.data)))


# ---------------------------------------------------------------- loops

@dataclass
class EpochStats:
    epoch: int
    mean_l1: float
    mean_l2: float
    freeze_steps: int
    full_steps: int
    train_accuracy: float


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent shuffle and noise streams so noise draws never shift batch order."""
    a, b = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(a), np.random.default_rng(b)


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, size):
        yield order[i:i + size]


def _run(net: FPDNetwork, data, cfg: TrainConfig,
         make_input: Callable[[np.ndarray, np.ndarray, np.random.Generator, int], np.ndarray],
         on_epoch: Callable[[EpochStats], None] | None = None) -> list[EpochStats]:
    images, labels = np.asarray(data.images), np.asarray(data.labels)
    shuffle_rng, noise_rng = _streams(cfg.seed)
    opt = PhaseOptimizers()
    history = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        l1s, l2s, sizes = [], [], []
        counts = {"freeze": 0, "full": 0}
        correct = 0
        for idx in _batches(len(labels), cfg.batch_size, shuffle_rng):
            xb, yb = images[idx], labels[idx]
            res = two_phase_step(net, xb, yb, cfg, opt, make_input(xb, yb, noise_rng, step))
            step += 1
            l1s.append(res.l1)
            l2s.append(res.l2)
            sizes.append(len(idx))
            counts[res.phase] += 1
            correct += res.correct
        w = np.asarray(sizes, dtype=np.float64)
        stats = EpochStats(epoch, float(np.dot(l1s, w) / w.sum()), float(np.dot(l2s, w) / w.sum()),
                           counts["freeze"], counts["full"], correct / len(labels))
        log.info("epoch %d: l1=%.4f l2=%.5f freeze=%d full=%d acc=%.4f", epoch, stats.mean_l1,
                 stats.mean_l2, stats.freeze_steps, stats.full_steps, stats.train_accuracy)
        history.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
    return history


def train(net, data, cfg: TrainConfig, on_epoch=None):
    """Train in place; returns (net, per-epoch history).

    FPD networks use the two-phase procedure; plain and substitute
    classifiers fall back to cross-entropy on noisy inputs.
    """
    if not isinstance(net, FPDNetwork):
        return net, fit_classifier(net, data, cfg, on_epoch)
    return net, _run(net, data, cfg, lambda xb, yb, rng, _: perturb(xb, cfg.eps, rng), on_epoch)


def adversarial_train(net, data, cfg: TrainConfig, attack_cfg: AttackConfig, on_epoch=None):
    """Like :func:`train` but each batch is replaced by attacks on the current network."""
    def make(xb, yb, rng, step):
        return attack(net, xb, yb, replace(attack_cfg, seed=attack_cfg.seed + step))

    if not isinstance(net, FPDNetwork):
        return net, fit_classifier(net, data, cfg, on_epoch, make)
    return net, _run(net, data, cfg, make, on_epoch)


def fit_classifier(model, data, cfg: TrainConfig, on_epoch=None, make_input=None) -> list[EpochStats]:
    """Plain cross-entropy training for baselines and substitutes."""
    images, labels = np.asarray(data.images), np.asarray(data.labels)
    shuffle_rng, noise_rng = _streams(cfg.seed)
    opt = OptimizerState()
    groups = model.param_groups()
    history = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        total, correct = 0.0, 0
        for idx in _batches(len(labels), cfg.batch_size, shuffle_rng):
            xb, yb = images[idx], labels[idx]
            if make_input is not None:
                xin = make_input(xb, yb, noise_rng, step)
            else:
                xin = perturb(xb, cfg.eps, noise_rng) if cfg.eps > 0 else xb
            step += 1
            logits = model.logits(Tensor(xin))
            loss = T.cross_entropy(logits, yb)
            T.backward(loss)
            optimizer_step(groups, opt, cfg)
            total += float(loss.data) * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=-1) == yb))
        stats = EpochStats(epoch, total / len(labels), 0.0, 0, 0, correct / len(labels))
        log.info("epoch %d: ce=%.4f acc=%.4f", epoch, stats.mean_l1, stats.train_accuracy)
        history.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
    return history


def config_fields() -> list[str]:
    return [f.name for f in fields(TrainConfig)]
