"""Named finite-difference checks for every differentiable operation.

Each check builds a scalar function of a few float64 tensors from a seed.
Scalar outputs are formed as ``sum(out * R)`` with a fixed random ``R`` so
every coordinate of ``out`` receives a generic, non-degenerate cotangent.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import arch
from . import tensor as T
from .tensor import Tensor

OP_TOL = 1e-4
COMPOSITE_TOL = 1e-3
# Whole-network checks: gradients below 1e-4 of the largest one are compared
# against that level instead of themselves (their difference quotients are
# dominated by float64 round-off).
COMPOSITE_FLOOR = 1e-4
DEFAULT_SEEDS = tuple(range(10))

Builder = Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[Tensor]]]


@dataclass(frozen=True)
class Check:
    name: str
    build: Builder
    tol: float = OP_TOL
    scale_floor: float = 0.0


@dataclass
class CheckResult:
    name: str
    tol: float
    worst: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.worst < self.tol


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape))


def _dot(out: Tensor, r: np.ndarray) -> Tensor:
    return T.sum(out * Tensor(r))


def _probe(fn, *shapes_scales):
    """Wrap ``fn`` as sum(fn(*xs) * R) with inputs drawn at the given shapes."""
    def build(rng):
        xs = [_t(rng, *shape, scale=s) for shape, s in shapes_scales]
        with T.no_grad():
            out_shape = fn(*xs).shape
        r = rng.normal(size=out_shape)
        return (lambda *a: _dot(fn(*a), r)), xs
    return build


def micro_config(**kw) -> arch.NetConfig:
    base = dict(image_size=8, channels=(4, 8), strides=(1, 2), shallow_count=1,
                inner_per_module=1, decoder_width=4, num_classes=3, dtype="float64")
    base.update(kw)
    return arch.NetConfig(**base)


def micro_network(rng: np.random.Generator, **kw):
    """Small FPD net with the zero-initialized projections randomized."""
    net = arch.build_network(micro_config(**kw), seed=int(rng.integers(1 << 31)))
    for name, (_, t) in net.registry.items():
        if ".proj." in name or name.endswith("bias"):
            t.data = rng.normal(0.0, 0.1, size=t.shape)
    return net


def _net_check(build_net, forward, img_shape, out_fn):
    def build(rng):
        net = build_net(rng)
        groups = net.param_groups()
        params = [t for _, _, t in groups]
        x = Tensor(rng.uniform(0.05, 0.95, size=img_shape))
        with T.no_grad():
            outs = forward(x, net)
        rs = [rng.normal(size=o.shape) for o in out_fn(outs)]

        def f(xin, *ps):
            return sum_terms([_dot(o, r) for o, r in zip(out_fn(forward(xin, net)), rs)])
        return f, [x, *params]
    return build


def sum_terms(terms):
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def _denoise_layer(rng, c, bottleneck=False):
    spec = arch.DenoiseLayerSpec(c, bottleneck=bottleneck)
    inner = c // 2 if bottleneck else c
    proj = arch.Conv(_t(rng, c, inner, 1, 1, scale=0.3), _t(rng, c, scale=0.1))
    down = arch.Conv(_t(rng, inner, c, 1, 1, scale=0.3), _t(rng, inner, scale=0.1)) if bottleneck else None
    return arch.DenoiseLayer(spec, proj, down)


def _denoise_check(c, bottleneck=False, middle=False):
    def build(rng):
        layer = _denoise_layer(rng, c, bottleneck)
        x = _t(rng, 2, c, 4, 4, scale=0.5)
        ps = [layer.proj.weight, layer.proj.bias]
        if layer.down is not None:
            ps += [layer.down.weight, layer.down.bias]
        fwd = arch.middle_denoise_forward if middle else arch.inner_denoise_forward
        with T.no_grad():
            r = rng.normal(size=fwd(x, layer).shape)
        return (lambda *a: _dot(fwd(a[0], layer), r)), [x, *ps]
    return build


def _block_check(cin, cout, stride):
    def build(rng):
        short = (arch.Conv(_t(rng, cout, cin, 1, 1, scale=0.4), _t(rng, cout, scale=0.1), stride)
                 if (cin != cout or stride != 1) else None)
        blk = arch.ResidualBlock(arch.Conv(_t(rng, cout, cin, 3, 3, scale=0.3), _t(rng, cout, scale=0.1), stride, 1),
                                 arch.Conv(_t(rng, cout, cout, 3, 3, scale=0.3), _t(rng, cout, scale=0.1), 1, 1),
                                 short)
        x = _t(rng, 2, cin, 6, 6)
        with T.no_grad():
            r = rng.normal(size=arch.residual_block_forward(x, blk).shape)
        ps = [blk.conv1.weight, blk.conv1.bias, blk.conv2.weight, blk.conv2.bias]
        if short is not None:
            ps += [short.weight, short.bias]
        return (lambda *a: _dot(arch.residual_block_forward(a[0], blk), r)), [x, *ps]
    return build


def _loss_check(kind):
    def build(rng):
        if kind == "cross_entropy":
            z = _t(rng, 5, 4)
            y = rng.integers(0, 4, size=5)
            return (lambda a: T.cross_entropy(a, y)), [z]
        a, b = _t(rng, 2, 3, 4), _t(rng, 2, 3, 4)
        return (lambda p, q: T.l2_loss(p, q)), [a, b]
    return build


def _restoration(fpd_out):
    return [fpd_out.restored]


def _fpd_outputs(o):
    return [o.probs, o.restored]


def _head_build(rng):
    net = micro_network(rng)
    feats = _t(rng, 2, 8, 4, 4)
    r = rng.normal(size=(2, 3))
    return (lambda f, w, b: _dot(arch.lcc_forward(f, net).probs, r)), [feats, net.lcc.weight, net.lcc.bias]


def _decoder_build(rng):
    net = micro_network(rng)
    f0, f1 = _t(rng, 2, 4, 8, 8), _t(rng, 2, 8, 4, 4)
    r = net.restoration
    ps = [t for lat in r.laterals for t in (lat.weight, lat.bias)] + [r.up_weight, r.up_bias,
                                                                     r.out.weight, r.out.bias]
    with T.no_grad():
        rr = rng.normal(size=arch.restoration_forward([f0, f1], net).shape)
    return (lambda a, b, *p: _dot(arch.restoration_forward([a, b], net), rr)), [f0, f1, *ps]


def _plain_forward(x, net):
    return [net.logits(x)]


CHECKS: tuple[Check, ...] = (
    Check("add_broadcast", _probe(lambda a, b: a + b, ((3, 4), 1.0), ((4,), 1.0))),
    Check("mul_broadcast", _probe(lambda a, b: a * b, ((2, 3, 4), 1.0), ((3, 1), 1.0))),
    Check("sub", _probe(lambda a, b: a - b, ((3, 4), 1.0), ((3, 4), 1.0))),
    Check("matmul_batched", _probe(T.matmul, ((2, 3, 4), 1.0), ((2, 4, 5), 1.0))),
    Check("sum_axis", _probe(lambda a: T.sum(a, axis=1), ((3, 4, 2), 1.0))),
    Check("mean_axes", _probe(lambda a: T.mean(a, axis=(2, 3)), ((2, 3, 4, 4), 1.0))),
    Check("reshape_transpose", _probe(lambda a: T.transpose(T.reshape(a, (4, 6)), (1, 0)),
                                      ((2, 3, 4), 1.0))),
    Check("elu", _probe(T.elu, ((4, 5), 1.0))),
    Check("relu", _probe(T.relu, ((4, 5), 1.0))),
    Check("tanh", _probe(T.tanh, ((4, 5), 1.0))),
    Check("sigmoid", _probe(T.sigmoid, ((4, 5), 2.0))),
    Check("softmax", _probe(T.softmax, ((3, 6), 1.0))),
    Check("cross_entropy", _loss_check("cross_entropy")),
    Check("l2_loss", _loss_check("l2")),
    Check("conv2d_s1_p1", _probe(lambda x, w, b: T.conv2d(x, w, b, 1, 1),
                                 ((2, 3, 5, 5), 1.0), ((4, 3, 3, 3), 0.5), ((4,), 0.5))),
    Check("conv2d_s2_p1", _probe(lambda x, w, b: T.conv2d(x, w, b, 2, 1),
                                 ((2, 3, 6, 6), 1.0), ((4, 3, 3, 3), 0.5), ((4,), 0.5))),
    Check("conv2d_1x1", _probe(lambda x, w, b: T.conv2d(x, w, b),
                               ((2, 3, 4, 4), 1.0), ((5, 3, 1, 1), 0.5), ((5,), 0.5))),
    Check("conv_transpose2d", _probe(lambda x, w, b: T.conv_transpose2d(x, w, b, 2, 1),
                                     ((2, 3, 3, 3), 1.0), ((3, 2, 4, 4), 0.5), ((2,), 0.5))),
    Check("upsample_nearest", _probe(lambda x: T.upsample_nearest(x, 2), ((2, 3, 3, 3), 1.0))),
    Check("nonlocal_dot", _probe(arch.nonlocal_dot, ((2, 3, 4, 4), 0.7))),
    Check("inner_denoise", _denoise_check(4)),
    Check("inner_denoise_bottleneck", _denoise_check(4, bottleneck=True)),
    Check("middle_denoise", _denoise_check(3, middle=True)),
    Check("residual_block_identity", _block_check(4, 4, 1)),
    Check("residual_block_projection", _block_check(3, 5, 2)),
    Check("restoration_decoder", _decoder_build),
    Check("lcc_head", _head_build),
    Check("fpd_forward_micro", _net_check(micro_network, arch.fpd_forward, (2, 3, 8, 8), _fpd_outputs),
          COMPOSITE_TOL, COMPOSITE_FLOOR),
    Check("plain_forward_micro",
          _net_check(lambda rng: arch.build_network(micro_config(kind="plain"),
                                                    int(rng.integers(1 << 31))),
                     _plain_forward, (2, 3, 8, 8), lambda o: o), COMPOSITE_TOL, COMPOSITE_FLOOR),
)


def run_check(check: Check, seeds=DEFAULT_SEEDS) -> CheckResult:
    t0 = time.perf_counter()
    worst = 0.0
    for s in seeds:
        f, inputs = check.build(np.random.default_rng([s, zlib.crc32(check.name.encode())]))
        worst = max(worst, T.finite_diff_gradcheck(f, inputs, scale_floor=check.scale_floor))
    return CheckResult(check.name, check.tol, worst, time.perf_counter() - t0)


def run_suite(seeds=DEFAULT_SEEDS, names=None) -> list[CheckResult]:
    chosen = [c for c in CHECKS if names is None or c.name in names]
    return [run_check(c, seeds) for c in chosen]


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'check':<28} {'max rel err':>12} {'tol':>8} {'time':>7}  result"]
    for r in results:
        lines.append(f"{r.name:<28} {r.worst:12.3e} {r.tol:8.0e} {r.seconds:6.2f}s  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
