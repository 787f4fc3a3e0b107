"""FPD-enhanced residual network.

Front denoising module (residual blocks with non-local denoising layers on
the shallow blocks), a feature-pyramid restoration decoder, a middle
denoising layer on the restored image, a back module that reuses the front
module's parameters, and a Tanh-squeezed classification head.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

TAGS = ("FD", "R", "MID", "BD", "LCC")


@dataclass(frozen=True)
class DenoiseLayerSpec:
    channels: int
    bottleneck: bool = False
    bottleneck_ratio: int = 2

    def __post_init__(self):
        if self.channels < 1 or self.bottleneck_ratio < 1:
            raise ValueError("channels and bottleneck_ratio must be positive")
        if self.bottleneck and self.channels % self.bottleneck_ratio:
            raise ValueError(
                f"{self.channels} channels not divisible by bottleneck ratio {self.bottleneck_ratio}")


@dataclass(frozen=True)
class BackboneSpec:
    blocks: tuple[tuple[int, int], ...] = ((8, 1), (16, 2), (32, 2), (64, 2))
    shallow_count: int = 2
    inner_per_module: int = 2

    def __post_init__(self):
        if not 1 <= self.shallow_count < len(self.blocks):
            raise ValueError(
                f"shallow_count must be in [1, {len(self.blocks)}), got {self.shallow_count}")
        if self.inner_per_module < 0:
            raise ValueError("inner_per_module must be >= 0")
        for c, s in self.blocks:
            if c < 1 or s < 1:
                raise ValueError(f"bad block descriptor {(c, s)}")


@dataclass(frozen=True)
class NetConfig:
    """Everything needed to rebuild a network; echoed into checkpoints."""

    kind: str = "fpd"  # fpd | plain
    image_size: int = 32
    in_channels: int = 3
    num_classes: int = 10
    channels: tuple[int, ...] = (8, 16, 32, 64)
    strides: tuple[int, ...] = (1, 2, 2, 2)
    shallow_count: int = 2
    inner_per_module: int = 2
    bottleneck: bool = False
    bottleneck_ratio: int = 2
    decoder_width: int = 16
    # The restored image starts dark and nearly flat (sigmoid(-2) ~ 0.12, close
    # to mean MNIST intensity).  A full-scale He init on the last conv lets the
    # first Adam steps push the sigmoid into saturation, where it never recovers.
    restore_out_scale: float = 0.1
    restore_out_bias: float = -2.0
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if self.kind not in ("fpd", "plain"):
            raise ValueError(f"unknown network kind {self.kind!r}")
        if len(self.channels) != len(self.strides):
            raise ValueError("channels and strides must have the same length")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        self.backbone()  # validates block geometry

    def backbone(self) -> BackboneSpec:
        return BackboneSpec(tuple(zip(self.channels, self.strides)), self.shallow_count,
                            self.inner_per_module)

    def denoise_spec(self, channels: int) -> DenoiseLayerSpec:
        return DenoiseLayerSpec(channels, self.bottleneck, self.bottleneck_ratio)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["strides"] = list(self.strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> NetConfig:
        return cls(**d)


# ---------------------------------------------------------------- parameter holders

@dataclass
class Conv:
    weight: Tensor
    bias: Tensor
    stride: int = 1
    pad: int = 0

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.pad)

    def named(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


@dataclass
class Linear:
    weight: Tensor  # [out, in]
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, T.transpose(self.weight, (1, 0))) + self.bias

    def named(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


@dataclass
class ResidualBlock:
    conv1: Conv
    conv2: Conv
    shortcut: Conv | None = None

    def named(self, prefix: str):
        yield from self.conv1.named(f"{prefix}.conv1")
        yield from self.conv2.named(f"{prefix}.conv2")
        if self.shortcut is not None:
            yield from self.shortcut.named(f"{prefix}.shortcut")


@dataclass
class DenoiseLayer:
    spec: DenoiseLayerSpec
    proj: Conv
    down: Conv | None = None

    def named(self, prefix: str):
        if self.down is not None:
            yield from self.down.named(f"{prefix}.down")
        yield from self.proj.named(f"{prefix}.proj")


@dataclass
class Restoration:
    laterals: list[Conv]  # one per block except the first
    up_weight: Tensor     # [F, F, 4, 4] transposed conv
    up_bias: Tensor
    out: Conv             # 3x3 conv to image channels

    def named(self, prefix: str):
        for i, lat in enumerate(self.laterals, start=1):
            yield from lat.named(f"{prefix}.lateral{i}")
        yield f"{prefix}.up.weight", self.up_weight
        yield f"{prefix}.up.bias", self.up_bias
        yield from self.out.named(f"{prefix}.out")


@dataclass
class FPDNetwork:
    config: NetConfig
    blocks: list[ResidualBlock]
    inner: list[list[DenoiseLayer]]  # denoising layers after each shallow block
    restoration: Restoration
    middle: DenoiseLayer
    lcc: Linear
    registry: dict[str, tuple[str, Tensor]] = field(default_factory=dict)

    def __post_init__(self):
        self.registry = dict(_fpd_registry(self))

    @property
    def input_shape(self) -> tuple[int, int, int]:
        c = self.config
        return (c.in_channels, c.image_size, c.image_size)

    def logits(self, x: Tensor) -> Tensor:
        return fpd_forward(x, self).logits

    def param_groups(self) -> list[tuple[str, frozenset[str], Tensor]]:
        return _groups(self.registry)


@dataclass
class PlainNetwork:
    """Same residual blocks with a global-pool + linear softmax head, no FPD parts."""

    config: NetConfig
    blocks: list[ResidualBlock]
    head: Linear
    registry: dict[str, tuple[str, Tensor]] = field(default_factory=dict)

    def __post_init__(self):
        reg = {}
        for i, blk in enumerate(self.blocks):
            for name, t in blk.named(f"backbone.block{i}"):
                reg[name] = ("BACKBONE", t)
        for name, t in self.head.named("head.fc"):
            reg[name] = ("HEAD", t)
        self.registry = reg

    @property
    def input_shape(self) -> tuple[int, int, int]:
        c = self.config
        return (c.in_channels, c.image_size, c.image_size)

    def logits(self, x: Tensor) -> Tensor:
        x, squeeze = _batch(x)
        for blk in self.blocks:
            x = residual_block_forward(x, blk)
        out = self.head(T.mean(x, axis=(2, 3)))
        return T.reshape(out, out.shape[1:]) if squeeze else out

    def param_groups(self) -> list[tuple[str, frozenset[str], Tensor]]:
        return _groups(self.registry)


@dataclass(frozen=True)
class FCConfig:
    """Fully-connected substitute classifier on flattened images."""

    kind: str = "substitute"
    image_size: int = 32
    in_channels: int = 3
    num_classes: int = 10
    hidden: tuple[int, ...] = (256, 128)
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.kind != "substitute":
            raise ValueError(f"FCConfig kind must be 'substitute', got {self.kind!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> FCConfig:
        return cls(**d)


@dataclass
class FCClassifier:
    config: FCConfig
    layers: list[Linear]
    registry: dict[str, tuple[str, Tensor]] = field(default_factory=dict)

    def __post_init__(self):
        self.registry = {name: ("SUB", t) for i, layer in enumerate(self.layers)
                         for name, t in layer.named(f"fc{i}")}

    @property
    def input_shape(self) -> tuple[int, int, int]:
        c = self.config
        return (c.in_channels, c.image_size, c.image_size)

    def logits(self, x: Tensor) -> Tensor:
        x, squeeze = _batch(x)
        h = T.reshape(x, (x.shape[0], -1))
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = T.elu(h)
        return T.reshape(h, h.shape[1:]) if squeeze else h

    def param_groups(self) -> list[tuple[str, frozenset[str], Tensor]]:
        return _groups(self.registry)


def build_substitute(config: FCConfig | None = None, seed: int = 0) -> FCClassifier:
    cfg = config or FCConfig()
    init = _Init(seed, np.dtype(cfg.dtype))
    dims = [cfg.in_channels * cfg.image_size ** 2, *cfg.hidden, cfg.num_classes]
    return FCClassifier(cfg, [init.linear(a, b) for a, b in zip(dims[:-1], dims[1:])])


def _fpd_registry(net: FPDNetwork):
    front = list(_front_named(net))
    for name, t in front:
        yield f"front.{name}", ("FD", t)
    for name, t in net.restoration.named("restore"):
        yield name, ("R", t)
    for name, t in net.middle.named("middle"):
        yield name, ("MID", t)
    for name, t in front:
        yield f"back.{name}", ("BD", t)
    for name, t in net.lcc.named("lcc.fc"):
        yield name, ("LCC", t)


def _front_named(net: FPDNetwork):
    for i, blk in enumerate(net.blocks):
        yield from blk.named(f"block{i}")
        if i < len(net.inner):
            for j, layer in enumerate(net.inner[i]):
                yield from layer.named(f"block{i}.denoise{j}")


def _groups(registry: dict[str, tuple[str, Tensor]]) -> list[tuple[str, frozenset[str], Tensor]]:
    """Unique storages with every tag they are registered under."""
    order: list[int] = []
    first: dict[int, str] = {}
    tags: dict[int, set[str]] = {}
    tensors: dict[int, Tensor] = {}
    for name, (tag, t) in registry.items():
        k = id(t)
        if k not in tensors:
            order.append(k)
            first[k] = name
            tags[k] = set()
            tensors[k] = t
        tags[k].add(tag)
    return [(first[k], frozenset(tags[k]), tensors[k]) for k in order]


# ---------------------------------------------------------------- forward passes

def _batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.data.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def nonlocal_dot(x: Tensor) -> Tensor:
    """Parameter-free dot-product non-local means.

    u_i = (1/N) * sum_j (v_i . v_j) v_j over the N = H*W positions, computed
    as (V V^T) V / N so the cost is O(C^2 N) rather than O(N^2 C).
    """
    x, squeeze = _batch(x)
    b, c, h, w = x.shape
    n = h * w
    v = T.reshape(x, (b, c, n))
    gram = T.matmul(v, T.transpose(v, (0, 2, 1)))
    u = T.reshape(T.matmul(gram, v) * (1.0 / n), (b, c, h, w))
    return T.reshape(u, (c, h, w)) if squeeze else u


def inner_denoise_forward(x: Tensor, layer: DenoiseLayer) -> Tensor:
    c = x.shape[-3]
    if c != layer.spec.channels:
        raise ValueError(f"denoise layer expects {layer.spec.channels} channels, got {c}")
    h = layer.down(x) if layer.down is not None else x
    return x + layer.proj(nonlocal_dot(h))


def middle_denoise_forward(img: Tensor, layer: DenoiseLayer) -> Tensor:
    if img.shape[-3] != 3:
        raise ValueError(f"middle denoising layer expects a 3-channel image, got {img.shape[-3]}")
    return inner_denoise_forward(img, layer)


def residual_block_forward(x: Tensor, blk: ResidualBlock) -> Tensor:
    cin = blk.conv1.weight.shape[1]
    if x.shape[-3] != cin:
        raise ValueError(f"residual block expects {cin} input channels, got {x.shape[-3]}")
    h = T.elu(blk.conv1(x))
    h = blk.conv2(h)
    skip = blk.shortcut(x) if blk.shortcut is not None else x
    return T.elu(h + skip)


def front_forward(x: Tensor, net: FPDNetwork) -> list[Tensor]:
    """Run the blocks, denoising after each shallow one; return every block output."""
    _check_resolution(x.shape[-2], x.shape[-1], net.config.strides)
    feats = []
    for i, blk in enumerate(net.blocks):
        x = residual_block_forward(x, blk)
        if i < len(net.inner):
            for layer in net.inner[i]:
                x = inner_denoise_forward(x, layer)
        feats.append(x)
    return feats


def back_forward(x: Tensor, net: FPDNetwork) -> Tensor:
    # same parameter objects as the front module
    return front_forward(x, net)[-1]


def restoration_forward(features: list[Tensor], net: FPDNetwork) -> Tensor:
    first = features[0]
    full = first.shape[-1] * net.config.strides[0]
    if full % 2:
        raise ValueError(f"input resolution {full} is not even")
    half = full // 2
    fused = None
    for feat, lat in zip(features[1:], net.restoration.laterals):
        res = feat.shape[-1]
        if res > half or half % res:
            raise ValueError(f"feature resolution {res} does not tile half resolution {half}")
        up = T.upsample_nearest(lat(feat), half // res)
        fused = up if fused is None else fused + up
    r = net.restoration
    h = T.elu(T.conv_transpose2d(fused, r.up_weight, r.up_bias, stride=2, pad=1))
    return T.sigmoid(r.out(h))


class HeadOutput(NamedTuple):
    probs: Tensor
    squeezed: Tensor


def lcc_forward(features: Tensor, net: FPDNetwork) -> HeadOutput:
    """Global average pool, linear, Tanh squeeze, softmax."""
    feats, squeeze = _batch(features)
    pooled = T.mean(feats, axis=(2, 3))
    s = T.tanh(net.lcc(pooled))
    if squeeze:
        s = T.reshape(s, s.shape[1:])
    return HeadOutput(T.softmax(s), s)


class FPDOutput(NamedTuple):
    probs: Tensor
    restored: Tensor
    logits: Tensor  # squeezed pre-softmax values in [-1, 1]


def fpd_forward(x: Tensor, net: FPDNetwork) -> FPDOutput:
    feats = front_forward(x, net)
    restored = restoration_forward(feats, net)
    cleaned = middle_denoise_forward(restored, net.middle)
    probs, squeezed = lcc_forward(back_forward(cleaned, net), net)
    return FPDOutput(probs, restored, squeezed)


def _check_resolution(h: int, w: int, strides) -> None:
    for s in strides:
        if h % s or w % s or h // s < 1:
            raise ValueError(f"resolution {h}x{w} too small or not divisible for strides {strides}")
        h, w = h // s, w // s


# ---------------------------------------------------------------- construction

class _Init:
    def __init__(self, seed: int, dtype):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype

    def he(self, shape, fan_in: float) -> Tensor:
        std = math.sqrt(2.0 / fan_in)
        return T.parameter(self.rng.normal(0.0, std, size=shape).astype(self.dtype))

    def zeros(self, shape) -> Tensor:
        return T.parameter(np.zeros(shape, dtype=self.dtype))

    def conv(self, cin: int, cout: int, k: int, stride: int = 1, pad: int = 0,
             zero: bool = False) -> Conv:
        shape = (cout, cin, k, k)
        w = self.zeros(shape) if zero else self.he(shape, cin * k * k)
        return Conv(w, self.zeros((cout,)), stride, pad)

    def linear(self, fin: int, fout: int) -> Linear:
        return Linear(self.he((fout, fin), fin), self.zeros((fout,)))


def _blocks(cfg: NetConfig, init: _Init) -> list[ResidualBlock]:
    blocks = []
    cin = cfg.in_channels
    for c, s in zip(cfg.channels, cfg.strides):
        short = init.conv(cin, c, 1, stride=s) if (cin != c or s != 1) else None
        blocks.append(ResidualBlock(init.conv(cin, c, 3, s, 1), init.conv(c, c, 3, 1, 1), short))
        cin = c
    return blocks


def _denoise(spec: DenoiseLayerSpec, init: _Init) -> DenoiseLayer:
    c = spec.channels
    if spec.bottleneck:
        inner = c // spec.bottleneck_ratio
        return DenoiseLayer(spec, init.conv(inner, c, 1, zero=True), init.conv(c, inner, 1))
    return DenoiseLayer(spec, init.conv(c, c, 1, zero=True))


def build_network(config: NetConfig | None = None, seed: int = 0):
    """Build an FPD (or plain baseline) network, deterministic under ``seed``.

    Convolutions and linear layers get He fan-in normal weights; the 1x1
    output convolutions of every denoising layer start at zero so each
    denoising layer is initially the identity.
    """
    cfg = config or NetConfig()
    _check_resolution(cfg.image_size, cfg.image_size, cfg.strides)
    init = _Init(seed, np.dtype(cfg.dtype))
    blocks = _blocks(cfg, init)
    if cfg.kind == "plain":
        return PlainNetwork(cfg, blocks, init.linear(cfg.channels[-1], cfg.num_classes))

    full = cfg.image_size // cfg.strides[0]
    half = cfg.image_size // 2
    res = full
    for s in cfg.strides[1:]:
        res //= s
        if res > half or half % res:
            raise ValueError(
                f"block resolution {res} cannot be upsampled to half input resolution {half}")
    inner = [[_denoise(cfg.denoise_spec(cfg.channels[i]), init)
              for _ in range(cfg.inner_per_module)]
             for i in range(cfg.shallow_count)]
    f = cfg.decoder_width
    restoration = Restoration(
        laterals=[init.conv(c, f, 1) for c in cfg.channels[1:]],
        up_weight=init.he((f, f, 4, 4), f * 4),
        up_bias=init.zeros((f,)),
        out=init.conv(f, cfg.in_channels, 3, 1, 1),
    )
    restoration.out.weight.data *= cfg.restore_out_scale
    restoration.out.bias.data[:] = cfg.restore_out_bias
    middle = _denoise(DenoiseLayerSpec(cfg.in_channels), init)
    lcc = init.linear(cfg.channels[-1], cfg.num_classes)
    return FPDNetwork(cfg, blocks, inner, restoration, middle, lcc)
