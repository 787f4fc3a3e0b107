"""FGSM / PGD attacks (L-inf and L2), robust accuracy and transfer attacks.

Images are numpy arrays [B, C, H, W] in [0, 1]; a model is anything with a
``logits(Tensor) -> Tensor`` method (or a bare callable doing the same).
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

KINDS = ("fgsm", "pgd")
NORMS = ("linf", "l2")


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "pgd"
    norm: str = "linf"
    eps: float = 0.3
    steps: int = 40
    step_size: float = 0.01
    random_init: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"attack kind must be one of {KINDS}, got {self.kind!r}")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        if self.kind == "pgd" and (self.steps < 1 or self.step_size <= 0):
            raise ValueError("pgd needs steps >= 1 and step_size > 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AttackResult:
    clean_accuracy: float
    robust_accuracy: float
    n_samples: int
    wall_time_s: float
    config: AttackConfig


def _forward(model) -> Callable[[Tensor], Tensor]:
    return model.logits if hasattr(model, "logits") else model


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim < 2:
        raise ValueError("expected a batch with a leading sample axis")
    return x


def _flat_norm(a: np.ndarray) -> np.ndarray:
    """Per-sample L2 norm broadcastable against ``a``."""
    n = np.sqrt(np.sum(a.reshape(a.shape[0], -1) ** 2, axis=1))
    return n.reshape((-1,) + (1,) * (a.ndim - 1))


def project(delta, norm: str, eps: float) -> np.ndarray:
    """Project one perturbation vector onto the eps-ball."""
    d = np.asarray(delta, dtype=np.float64) if not isinstance(delta, np.ndarray) else delta
    if norm == "linf":
        return np.clip(d, -eps, eps)
    if norm == "l2":
        n = float(np.sqrt(np.sum(d * d)))
        return d * (eps / n) if n > eps else d.copy()
    raise ValueError(f"unknown norm {norm!r}")


def project_batch(delta: np.ndarray, norm: str, eps: float) -> np.ndarray:
    if norm == "linf":
        return np.clip(delta, -eps, eps)
    n = _flat_norm(delta)
    scale = np.where(n > eps, eps / np.where(n > 0, n, 1.0), 1.0)
    return delta * scale.astype(delta.dtype)


def input_gradient(model, x: np.ndarray, y) -> np.ndarray:
    """d CE(model(x), y) / dx, summed over the batch."""
    xt = Tensor(np.array(x), requires_grad=True)
    loss = T.cross_entropy(_forward(model)(xt), y, reduction="sum")
    T.backward(loss, wrt=[xt])
    g = xt.grad if xt.grad is not None else np.zeros_like(xt.data)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite input gradient")
    return g


def _direction(g: np.ndarray, norm: str) -> np.ndarray:
    if norm == "linf":
        return np.sign(g)
    n = _flat_norm(g)
    return g / np.where(n > 0, n, 1.0)


def fgsm(model, x, y, cfg: AttackConfig) -> np.ndarray:
    x = _as_batch(x)
    g = input_gradient(model, x, y)
    return np.clip(x + cfg.eps * _direction(g, cfg.norm), 0.0, 1.0)


def _random_start(x: np.ndarray, cfg: AttackConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.norm == "linf":
        d = rng.uniform(-cfg.eps, cfg.eps, size=x.shape)
    else:
        d = rng.normal(size=x.shape)
        dim = d[0].size
        r = cfg.eps * rng.uniform(size=x.shape[0]) ** (1.0 / dim)
        d = d / np.maximum(_flat_norm(d), 1e-12) * r.reshape((-1,) + (1,) * (x.ndim - 1))
    return np.clip(x + d.astype(x.dtype), 0.0, 1.0)


def pgd(model, x, y, cfg: AttackConfig, on_step: Callable[[int, np.ndarray], None] | None = None
        ) -> np.ndarray:
    """Iterated gradient steps, each projected onto the ball and clipped to [0, 1]."""
    x = _as_batch(x)
    rng = np.random.default_rng(cfg.seed)
    x_adv = _random_start(x, cfg, rng) if cfg.random_init else x.copy()
    for i in range(cfg.steps):
        g = input_gradient(model, x_adv, y)
        step = cfg.step_size * _direction(g, cfg.norm)
        delta = project_batch((x_adv - x) + step, cfg.norm, cfg.eps)
        x_adv = np.clip(x + delta, 0.0, 1.0)
        if on_step is not None:
            on_step(i, x_adv)
    return x_adv


def attack(model, x, y, cfg: AttackConfig) -> np.ndarray:
    return fgsm(model, x, y, cfg) if cfg.kind == "fgsm" else pgd(model, x, y, cfg)


def predict(model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    f = _forward(model)
    out = []
    with T.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(np.argmax(f(Tensor(x[i:i + batch_size])).data, axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def _check_shapes(a, b) -> None:
    sa, sb = getattr(a, "input_shape", None), getattr(b, "input_shape", None)
    if sa is not None and sb is not None and tuple(sa) != tuple(sb):
        raise ValueError(f"models disagree on input shape: {sa} vs {sb}")


def _evaluate(source, target, data, cfg: AttackConfig, batch_size: int) -> AttackResult:
    images, labels = np.asarray(data.images), np.asarray(data.labels)
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    t0 = time.perf_counter()
    clean = robust = 0
    for i in range(0, len(labels), batch_size):
        xb, yb = images[i:i + batch_size], labels[i:i + batch_size]
        clean += int(np.sum(predict(target, xb) == yb))
        xa = attack(source, xb, yb, cfg)
        robust += int(np.sum(predict(target, xa) == yb))
    n = len(labels)
    return AttackResult(clean / n, robust / n, n, time.perf_counter() - t0, cfg)


def robust_accuracy(model, data, cfg: AttackConfig, batch_size: int = 100) -> AttackResult:
    """White-box accuracy on attacked inputs; ``data`` has ``images`` and ``labels``."""
    return _evaluate(model, model, data, cfg, batch_size)


def transfer_attack(substitute, target, data, cfg: AttackConfig,
                    batch_size: int = 100) -> AttackResult:
    """Craft examples on ``substitute`` and score them on ``target``."""
    _check_shapes(substitute, target)
    return _evaluate(substitute, target, data, cfg, batch_size)


def train_substitute(data, seed: int = 0, epochs: int = 5, lr: float = 1e-3,
                     batch_size: int = 64, hidden: tuple[int, ...] = (256, 128)):
    """Three-layer ELU fully-connected classifier for black-box transfer."""
    from .arch import FCConfig, build_substitute
    from .training import TrainConfig, fit_classifier

    images = np.asarray(data.images)
    _, c, h, _ = images.shape
    model = build_substitute(FCConfig(image_size=h, in_channels=c,
                                      num_classes=int(getattr(data, "num_classes", 10)),
                                      hidden=hidden, dtype=str(images.dtype)), seed)
    cfg = TrainConfig(epochs=epochs, lr=lr, batch_size=batch_size, seed=seed, eps=0.0, wd=0.0)
    fit_classifier(model, data, cfg)
    return model
