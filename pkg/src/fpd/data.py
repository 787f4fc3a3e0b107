"""IDX datasets, preprocessing, checkpoints, metrics CSV and config files."""

from __future__ import annotations

import csv
import dataclasses
import gzip
import json
import os
import struct
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .arch import FCConfig, NetConfig, build_network, build_substitute

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
SUPPORTED_SIZES = (8, 16, 28, 32, 64)


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------- IDX

def _read_bytes(path) -> bytes:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(buf: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    if len(buf) < 4 + 4 * ndim:
        raise FormatError(f"{what}: truncated header ({len(buf)} bytes)")
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise FormatError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", buf[4:4 + 4 * ndim])
    body = buf[4 + 4 * ndim:]
    want = int(np.prod(dims, dtype=np.int64))
    if len(body) < want:
        raise FormatError(f"{what}: truncated data, header declares {want} bytes, found {len(body)}")
    if len(body) > want:
        raise FormatError(f"{what}: {len(body) - want} trailing bytes after declared data")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


@dataclass
class RawImages:
    images: np.ndarray  # uint8 [n, rows, cols]
    labels: np.ndarray  # uint8 [n]


def load_idx(images_path, labels_path) -> RawImages:
    imgs = _parse_idx(_read_bytes(images_path), IMAGE_MAGIC, 3, str(images_path))
    labels = _parse_idx(_read_bytes(labels_path), LABEL_MAGIC, 1, str(labels_path))
    if imgs.shape[0] != labels.shape[0]:
        raise FormatError(f"count mismatch: {imgs.shape[0]} images vs {labels.shape[0]} labels")
    return RawImages(imgs, labels)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
        raise ValueError("expected images [n, rows, cols] and labels [n]")
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">4I", IMAGE_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">2I", LABEL_MAGIC, len(labels)))
        fh.write(labels.tobytes())


# ---------------------------------------------------------------- preprocessing

@dataclass
class Dataset:
    images: np.ndarray  # [n, C, S, S] in [0, 1]
    labels: np.ndarray  # int64 [n]
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if self.images.shape[0] != len(self.labels):
            raise ValueError("images and labels disagree on sample count")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixels must lie in [0, 1]")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int) -> Dataset:
        return Dataset(self.images[:n], self.labels[:n], self.split, self.num_classes)


def resize_nearest(imgs: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize of [..., H, W] to [..., size, size]."""
    h, w = imgs.shape[-2:]
    rows = (np.arange(size) * h) // size
    cols = (np.arange(size) * w) // size
    return imgs[..., rows[:, None], cols[None, :]]


def preprocess(raw: RawImages, size: int = 32, channels: int = 3, dtype="float32",
               split: str = "train", num_classes: int = 10) -> Dataset:
    if size not in SUPPORTED_SIZES:
        raise ValueError(f"unsupported image size {size}; choose one of {SUPPORTED_SIZES}")
    x = raw.images.astype(np.float64) / 255.0
    x = resize_nearest(x, size)
    x = np.repeat(x[:, None], channels, axis=1).astype(dtype)
    return Dataset(np.ascontiguousarray(x), raw.labels.astype(np.int64), split, num_classes)


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"{stem}[.gz] not found in {directory}")


def load_mnist_dir(directory, size: int = 32, train_limit: int | None = None,
                   test_limit: int | None = None, dtype="float32") -> tuple[Dataset, Dataset]:
    """Load the standard four IDX files (optionally gzipped) from one directory."""
    d = Path(directory)
    tr = load_idx(_find(d, "train-images-idx3-ubyte"), _find(d, "train-labels-idx1-ubyte"))
    te = load_idx(_find(d, "t10k-images-idx3-ubyte"), _find(d, "t10k-labels-idx1-ubyte"))
    train = preprocess(RawImages(tr.images[:train_limit], tr.labels[:train_limit]), size,
                       dtype=dtype, split="train")
    test = preprocess(RawImages(te.images[:test_limit], te.labels[:test_limit]), size,
                      dtype=dtype, split="test")
    return train, test


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"FPDC"
CHECKPOINT_VERSION = 1


def _model_config(net):
    return net.config


def save_checkpoint(net, path) -> None:
    """Binary checkpoint: magic, u32 version, JSON config, then named float32 records.

    All integers are little-endian u32.  Storage shared between several
    registry names (the front/back denoising modules) is written once.
    """
    cfg = json.dumps(_model_config(net).to_dict(), sort_keys=True).encode()
    groups = net.param_groups()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg,
             struct.pack("<I", len(groups))]
    for name, _, t in groups:
        nb = name.encode()
        data = np.ascontiguousarray(t.data, dtype="<f4")
        parts.append(struct.pack("<II", len(nb), data.ndim))
        parts.append(nb)
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated checkpoint at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals


def _config_from(d: dict):
    kind = d.get("kind")
    if kind in ("fpd", "plain"):
        return NetConfig.from_dict(d)
    if kind == "substitute":
        return FCConfig.from_dict(d)
    raise FormatError(f"unknown model kind {kind!r} in checkpoint")


def load_checkpoint(path):
    buf = Path(path).read_bytes()
    r = _Reader(buf, path)
    magic = r.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    version, cfg_len = r.u32(2)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        cfg = _config_from(json.loads(r.take(cfg_len).decode()))
    except (json.JSONDecodeError, TypeError) as e:
        raise FormatError(f"{path}: unreadable architecture config: {e}") from e
    net = build_substitute(cfg) if isinstance(cfg, FCConfig) else build_network(cfg)
    registry = net.registry
    dtype = np.dtype(cfg.dtype)
    seen = set()
    for _ in range(r.u32()):
        name_len, ndim = r.u32(2)
        name = r.take(name_len).decode()
        shape = tuple(r.u32(ndim)) if ndim > 1 else ((r.u32(),) if ndim == 1 else ())
        if name not in registry:
            raise FormatError(f"{path}: unknown parameter {name!r}")
        t = registry[name][1]
        if shape != t.shape:
            raise FormatError(f"{path}: {name} has dims {shape}, model expects {t.shape}")
        n = int(np.prod(shape, dtype=np.int64)) * 4
        data = np.frombuffer(r.take(n), dtype="<f4").reshape(shape)
        t.data[...] = data.astype(dtype)
        seen.add(id(t))
    if r.pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - r.pos} trailing bytes")
    missing = [n for n, _, t in net.param_groups() if id(t) not in seen]
    if missing:
        raise FormatError(f"{path}: missing parameters {missing[:5]}")
    return net


# ---------------------------------------------------------------- metrics

METRICS_HEADER = ("model", "attack", "norm", "epsilon", "steps", "step_size", "accuracy",
                  "n_samples", "wall_time_s", "seed")


@dataclass
class MetricsRecord:
    model: str
    attack: str
    norm: str
    epsilon: float
    steps: int
    step_size: float
    accuracy: float
    n_samples: int
    wall_time_s: float
    seed: int

    def row(self) -> list[str]:
        return [self.model, self.attack, self.norm, repr(float(self.epsilon)), str(int(self.steps)),
                repr(float(self.step_size)), f"{self.accuracy:.6f}", str(int(self.n_samples)),
                f"{self.wall_time_s:.3f}", str(int(self.seed))]


def write_metrics(records: Iterable[MetricsRecord], path) -> None:
    """Append rows to a CSV, writing the header only when the file is new or empty."""
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if fresh:
            w.writerow(METRICS_HEADER)
        for rec in records:
            w.writerow(rec.row())


# ---------------------------------------------------------------- config files

def _coerce(raw: str, ftype, key: str):
    raw = raw.strip()
    t = ftype if isinstance(ftype, str) else getattr(ftype, "__name__", str(ftype))
    try:
        if "None" in t and raw.lower() in ("none", ""):
            return None
        if t.startswith("bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if t.startswith("int"):
            return int(raw)
        if t.startswith("float"):
            return float(raw)
    except ValueError:
        raise ValueError(f"cannot parse {key} = {raw!r} as {t}") from None
    return raw


def parse_pairs(lines: Iterable[str], source: str = "<config>") -> dict[str, str]:
    out = {}
    for i, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{i}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_config(cls, values: dict[str, str], seed_env: str = "FPD_SEED"):
    """Instantiate a config dataclass from string values, rejecting unknown keys."""
    fmap = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(fmap))
    if unknown:
        raise ValueError(f"unknown config key(s) {unknown}; valid keys: {sorted(fmap)}")
    kwargs = {k: _coerce(v, fmap[k].type, k) for k, v in values.items()}
    if "seed" in fmap and "seed" not in kwargs and os.environ.get(seed_env):
        kwargs["seed"] = _coerce(os.environ[seed_env], "int", seed_env)
    return cls(**kwargs)


def load_config(path, cls=None, overrides: Iterable[str] = (), echo=True):
    """Parse a ``key = value`` file (path may be None), apply overrides, echo the result."""
    if cls is None:
        from .training import TrainConfig as cls
    values = {}
    if path is not None:
        values = parse_pairs(Path(path).read_text().splitlines(), str(path))
    values.update(parse_pairs(overrides, "--override"))
    cfg = build_config(cls, values)
    if echo:
        echo_config(cfg)
    return cfg


def echo_config(cfg, stream=None) -> None:
    stream = stream or sys.stdout
    print(f"# resolved {type(cfg).__name__}", file=stream)
    for k, v in dataclasses.asdict(cfg).items():
        print(f"{k} = {v}", file=stream)
