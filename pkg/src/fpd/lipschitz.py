"""Component-wise output-variation bound for fully-connected softmax networks.

For an L-layer network with hidden activation of Lipschitz constant C, the
softmax output moves by at most

    V_k <= exp(theta_k(x)) * (exp(eta) - exp(-eta)) / sum_p exp(theta_p(x + xi))

where theta is the softmax input and

    eta = max_k [ w_L * C^(L-1) * |w_{L-1} ... w_1 xi| + b_L ]_k

or, with a Tanh squeeze (Lipschitz constant C_s) in front of the softmax,

    eta = max_k C_s * C^(L-1) * |w_L w_{L-1} ... w_1 xi|_k.

Everything here is plain float64 numpy, independent of the autodiff engine.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

LIPSCHITZ = {"relu": 1.0, "elu": 1.0, "tanh": 1.0}
SQUEEZE_LIPSCHITZ = 1.0  # Tanh
VIOLATION_TOL = 1e-9


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "elu":
        return np.where(z >= 0, z, np.expm1(np.minimum(z, 0.0)))
    if kind == "tanh":
        return np.tanh(z)
    raise ValueError(f"unsupported activation {kind!r}")


def _softmax(theta: np.ndarray) -> np.ndarray:
    e = np.exp(theta - theta.max())
    return e / e.sum()


@dataclass
class FCNetwork:
    weights: list[np.ndarray]  # w_i has shape [out, in]
    biases: list[np.ndarray]
    activation: str = "elu"
    squeezed: bool = False

    def __post_init__(self):
        if self.activation not in LIPSCHITZ:
            raise ValueError(f"unsupported activation {self.activation!r}")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: bias shape {b.shape} does not match {w.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i} input {w.shape[1]} != previous output "
                                 f"{self.weights[i - 1].shape[0]}")

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def lipschitz(self) -> float:
        return LIPSCHITZ[self.activation]


def fc_forward(net: FCNetwork, x) -> tuple[np.ndarray, np.ndarray]:
    """Return (probabilities, theta) where theta is the softmax input."""
    h = np.asarray(x, dtype=np.float64)
    if h.shape != (net.weights[0].shape[1],):
        raise ValueError(f"input dimension {h.shape} does not match {net.weights[0].shape[1]}")
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        h = _act(w @ h + b, net.activation)
    theta = net.weights[-1] @ h + net.biases[-1]
    if net.squeezed:
        theta = np.tanh(theta)
    return _softmax(theta), theta


def eta(net: FCNetwork, xi, squeezed: bool | None = None) -> float:
    squeezed = net.squeezed if squeezed is None else squeezed
    if net.depth < 2:
        raise ValueError("the variation bound needs at least two layers")
    v = np.asarray(xi, dtype=np.float64)
    for w in net.weights[:-1]:
        v = w @ v
    scale = net.lipschitz ** (net.depth - 1)
    if squeezed:
        return float(np.max(SQUEEZE_LIPSCHITZ * scale * np.abs(net.weights[-1] @ v)))
    return float(np.max(net.weights[-1] @ (scale * np.abs(v)) + net.biases[-1]))


def variation_bound(net: FCNetwork, x, xi) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    xi = np.asarray(xi, dtype=np.float64)
    _, theta_x = fc_forward(net, x)
    _, theta_n = fc_forward(net, x + xi)
    e = eta(net, xi)
    # shared shift: exp(theta_x - m) / sum exp(theta_n - m)
    m = max(theta_x.max(), theta_n.max())
    num = np.exp(theta_x - m)
    den = np.exp(theta_n - m).sum()
    with np.errstate(over="ignore", invalid="ignore"):
        bound = num * (np.exp(e) - np.exp(-e)) / den
    if not np.all(np.isfinite(bound)):
        raise OverflowError(f"variation bound overflowed (eta={e})")
    return bound


def empirical_variation(net: FCNetwork, x, xi) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    p0, _ = fc_forward(net, x)
    p1, _ = fc_forward(net, x + np.asarray(xi, dtype=np.float64))
    return np.abs(p0 - p1)


@dataclass
class VariationReport:
    theta_x: np.ndarray
    theta_xnoise: np.ndarray
    eta: float
    bound: np.ndarray
    measured: np.ndarray
    violations: np.ndarray

    @property
    def violated(self) -> bool:
        return bool(self.violations.any())

    @property
    def max_violation(self) -> float:
        return float(np.max(self.measured - self.bound))


def variation_report(net: FCNetwork, x, xi) -> VariationReport:
    x = np.asarray(x, dtype=np.float64)
    xi = np.asarray(xi, dtype=np.float64)
    _, tx = fc_forward(net, x)
    _, tn = fc_forward(net, x + xi)
    bound = variation_bound(net, x, xi)
    measured = empirical_variation(net, x, xi)
    return VariationReport(tx, tn, eta(net, xi), bound, measured,
                           measured > bound + VIOLATION_TOL)


REGIMES = ("nonnegative-last-layer", "unconstrained")


def random_fc_network(dims: Sequence[int], activation: str, regime: str,
                      rng: np.random.Generator, squeezed: bool = False) -> FCNetwork:
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    ws, bs = [], []
    pairs = list(zip(dims[:-1], dims[1:]))
    for i, (fin, fout) in enumerate(pairs):
        last = i == len(pairs) - 1
        lo = 0.0 if (last and regime == "nonnegative-last-layer") else -0.5
        ws.append(rng.uniform(lo, 0.5, size=(fout, fin)))
        bs.append(rng.uniform(lo, 0.5, size=fout))
    return FCNetwork(ws, bs, activation, squeezed)


@dataclass
class TrialRecord:
    trial: int
    eta: float
    max_measured: float
    max_bound: float
    violated: bool
    max_violation: float


@dataclass
class BoundExperiment:
    trials: list[TrialRecord] = field(default_factory=list)

    @property
    def violation_count(self) -> int:
        return sum(t.violated for t in self.trials)

    @property
    def max_violation(self) -> float:
        return max((t.max_violation for t in self.trials), default=0.0)

    @property
    def findings(self) -> list[TrialRecord]:
        return [t for t in self.trials if t.violated]


def bound_experiment(trials: int, dims: Sequence[int] = (4, 8, 5), activation: str = "elu",
                     noise_eps: float = 0.3, regime: str = "nonnegative-last-layer",
                     seed: int = 0, squeezed: bool = False) -> BoundExperiment:
    """Random falsification run; violations are recorded, never raised."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if len(dims) < 3:
        raise ValueError("need at least two layers (three dims)")
    out = BoundExperiment()
    for i in range(trials):
        rng = np.random.default_rng(seed + i)
        net = random_fc_network(dims, activation, regime, rng, squeezed)
        x = rng.uniform(0.0, 1.0, size=dims[0])
        xi = rng.uniform(-noise_eps, noise_eps, size=dims[0])
        rep = variation_report(net, x, xi)
        out.trials.append(TrialRecord(i, rep.eta, float(rep.measured.max()),
                                      float(rep.bound.max()), rep.violated, rep.max_violation))
    return out
