import csv
import gzip
import io
import struct

import numpy as np
import pytest

from conftest import MNIST_DIR
from fpd.arch import FCConfig, NetConfig, build_network, build_substitute
from fpd.data import (METRICS_HEADER, Dataset, FormatError, MetricsRecord, RawImages, load_checkpoint,
                      load_config, load_idx, load_mnist_dir, preprocess, resize_nearest, save_checkpoint,
                      write_idx, write_metrics)
from fpd.gradsuite import micro_config
from fpd.training import TrainConfig

FIXTURE_PIXELS = bytes(range(0, 32 * 8, 8))  # 32 bytes: two 4x4 images
FIXTURE_LABELS = bytes([7, 2])


def fixture_files(tmp_path):
    # written by hand, independently of write_idx
    img = struct.pack(">IIII", 0x803, 2, 4, 4) + FIXTURE_PIXELS
    lab = struct.pack(">II", 0x801, 2) + FIXTURE_LABELS
    ip, lp = tmp_path / "img", tmp_path / "lab"
    ip.write_bytes(img)
    lp.write_bytes(lab)
    return ip, lp


def test_idx_fixture_parses_to_known_bytes(tmp_path):
    raw = load_idx(*fixture_files(tmp_path))
    assert raw.images.shape == (2, 4, 4)
    assert raw.images[0, 0, 1] == 8 and raw.images[1, 3, 3] == 248
    assert raw.images.tobytes() == FIXTURE_PIXELS
    assert raw.labels.tolist() == [7, 2]


def test_write_idx_is_byte_identical_to_hand_fixture(tmp_path):
    ip, lp = fixture_files(tmp_path)
    raw = load_idx(ip, lp)
    write_idx(raw.images, raw.labels, tmp_path / "i2", tmp_path / "l2")
    assert (tmp_path / "i2").read_bytes() == ip.read_bytes()
    assert (tmp_path / "l2").read_bytes() == lp.read_bytes()


def test_gzipped_idx(tmp_path):
    ip, lp = fixture_files(tmp_path)
    gz = tmp_path / "img.gz"
    gz.write_bytes(gzip.compress(ip.read_bytes()))
    assert load_idx(gz, lp).images.tobytes() == FIXTURE_PIXELS


def test_bad_magic_names_the_value(tmp_path):
    ip, lp = fixture_files(tmp_path)
    ip.write_bytes(struct.pack(">I", 0x804) + ip.read_bytes()[4:])
    with pytest.raises(FormatError, match="0x00000804"):
        load_idx(ip, lp)


def test_truncated_and_mismatched(tmp_path):
    ip, lp = fixture_files(tmp_path)
    good = ip.read_bytes()
    ip.write_bytes(good[:-1])
    with pytest.raises(FormatError, match="truncated"):
        load_idx(ip, lp)
    ip.write_bytes(good[:10])
    with pytest.raises(FormatError):
        load_idx(ip, lp)
    ip.write_bytes(good)
    lp.write_bytes(struct.pack(">II", 0x801, 3) + bytes([1, 2, 3]))
    with pytest.raises(FormatError, match="count mismatch"):
        load_idx(ip, lp)


def test_desk_split_counts():
    if not (__import__("os").path.isdir(MNIST_DIR)):
        pytest.skip("prepared MNIST split not present")
    train, test = load_mnist_dir(MNIST_DIR, size=32)
    assert train.images.shape == (4000, 3, 32, 32) and len(test) == 1000
    assert np.bincount(train.labels).tolist() == [400] * 10


# ---- preprocessing

def test_normalization_endpoints_and_channels():
    raw = RawImages(np.array([[[0, 255], [128, 255]]], dtype=np.uint8), np.array([1], dtype=np.uint8))
    ds = preprocess(raw, size=8)
    assert ds.images.shape == (1, 3, 8, 8)
    assert ds.images.max() == 1.0 and ds.images.min() == 0.0
    assert np.array_equal(ds.images[0, 0], ds.images[0, 1]) and np.array_equal(ds.images[0, 1], ds.images[0, 2])


def test_resize_identity_and_nearest_oracle(rng):
    x = rng.integers(0, 256, size=(2, 28, 28)).astype(np.uint8)
    assert np.array_equal(resize_nearest(x, 28), x)
    y = resize_nearest(x, 32)
    for i in (0, 7, 31):
        for j in (0, 13, 31):
            assert y[1, i, j] == x[1, int(i * 28 / 32), int(j * 28 / 32)]


def test_unsupported_size():
    raw = RawImages(np.zeros((1, 28, 28), dtype=np.uint8), np.zeros(1, dtype=np.uint8))
    with pytest.raises(ValueError):
        preprocess(raw, size=30)


def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3, 4, 4)), np.zeros(3, dtype=int))
    with pytest.raises(ValueError):
        Dataset(np.full((1, 3, 4, 4), 1.5), np.zeros(1, dtype=int))
    with pytest.raises(ValueError):
        Dataset(np.zeros((1, 3, 4, 4)), np.array([10]))


# ---- checkpoints

@pytest.mark.parametrize("make", [
    lambda: build_network(NetConfig(dtype="float32"), seed=1),
    lambda: build_network(NetConfig(kind="plain", dtype="float32"), seed=1),
    lambda: build_substitute(FCConfig(image_size=8, hidden=(5,)), seed=1),
])
def test_checkpoint_round_trip_is_bitwise(tmp_path, make):
    net = make()
    p = tmp_path / "m.ck"
    save_checkpoint(net, p)
    back = load_checkpoint(p)
    assert back.config == net.config
    assert list(back.registry) == list(net.registry)
    for name, (_, t) in net.registry.items():
        assert back.registry[name][1].data.tobytes() == t.data.astype(np.float32).tobytes()


def test_float64_nets_round_trip_at_32_bit(tmp_path):
    net = build_network(micro_config(), seed=3)
    save_checkpoint(net, tmp_path / "m.ck")
    back = load_checkpoint(tmp_path / "m.ck")
    for name, (_, t) in net.registry.items():
        assert np.array_equal(back.registry[name][1].data, t.data.astype(np.float32).astype(np.float64))


def test_loaded_checkpoint_keeps_weight_sharing(tmp_path):
    save_checkpoint(build_network(micro_config(), seed=0), tmp_path / "m.ck")
    net = load_checkpoint(tmp_path / "m.ck")
    front = net.registry["front.block0.conv1.weight"][1]
    back = net.registry["back.block0.conv1.weight"][1]
    front.data[0, 0, 0, 0] = 42.0
    assert back.data[0, 0, 0, 0] == 42.0


def test_shared_parameters_stored_once(tmp_path):
    net = build_network(micro_config(), seed=0)
    save_checkpoint(net, tmp_path / "m.ck")
    blob = (tmp_path / "m.ck").read_bytes()
    assert b"front.block0.conv1.weight" in blob and b"back.block0" not in blob


def _saved(tmp_path):
    p = tmp_path / "m.ck"
    save_checkpoint(build_network(micro_config(), seed=0), p)
    return p, p.read_bytes()


def test_checkpoint_corruption(tmp_path):
    p, blob = _saved(tmp_path)
    p.write_bytes(blob[:-3])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(p)
    p.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(p)
    p.write_bytes(blob[:4] + struct.pack("<I", 99) + blob[8:])
    with pytest.raises(FormatError, match="version"):
        load_checkpoint(p)
    p.write_bytes(blob.replace(b"lcc.fc.bias", b"lcc.fc.bixs"))
    with pytest.raises(FormatError, match="unknown parameter"):
        load_checkpoint(p)
    p.write_bytes(blob.replace(b'"num_classes": 3', b'"num_classes": 4'))
    with pytest.raises(FormatError, match="dims"):
        load_checkpoint(p)
    p.write_bytes(blob + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        load_checkpoint(p)


# ---- metrics

def _rec(acc=0.5):
    return MetricsRecord("fpd:a", "pgd", "linf", 0.3, 40, 0.01, acc, 1000, 12.5, 0)


def test_metrics_header_only(tmp_path):
    write_metrics([], tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text() == ",".join(METRICS_HEADER) + "\n"


def test_metrics_append_and_format(tmp_path):
    p = tmp_path / "m.csv"
    write_metrics([_rec(2 / 3)], p)
    lines = p.read_text().splitlines()
    assert len(lines) == 2 and "0.666667" in lines[1]
    write_metrics([_rec(), _rec()], p)
    rows = list(csv.reader(io.StringIO(p.read_text())))
    assert rows[0] == list(METRICS_HEADER) and len(rows) == 4
    assert {len(r) for r in rows} == {len(METRICS_HEADER)}


def test_metrics_unwritable(tmp_path):
    with pytest.raises(OSError):
        write_metrics([_rec()], tmp_path / "missing" / "m.csv")


# ---- config files

def test_config_parsing(tmp_path, capsys):
    p = tmp_path / "c.cfg"
    p.write_text("# desk run\neps = 0.3\nepochs=4   # short\noptimizer = sgd\n\n")
    cfg = load_config(p)
    assert cfg.eps == 0.3 and cfg.epochs == 4 and cfg.optimizer == "sgd"
    out = capsys.readouterr().out
    assert "eps = 0.3" in out and "threshold_t = 0.01" in out


def test_empty_config_gives_defaults(tmp_path, monkeypatch):
    monkeypatch.delenv("FPD_SEED", raising=False)
    p = tmp_path / "c.cfg"
    p.write_text("")
    assert load_config(p, echo=False) == TrainConfig()


def test_config_errors(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("foo = 1\n")
    with pytest.raises(ValueError, match="valid keys"):
        load_config(p, echo=False)
    p.write_text("epochs = ten\n")
    with pytest.raises(ValueError, match="epochs"):
        load_config(p, echo=False)
    p.write_text("epochs = 0\n")
    with pytest.raises(ValueError):
        load_config(p, echo=False)
    p.write_text("just words\n")
    with pytest.raises(ValueError):
        load_config(p, echo=False)


def test_override_precedence_and_env_seed(tmp_path, monkeypatch):
    p = tmp_path / "c.cfg"
    p.write_text("lr = 0.5\nepochs = 3\n")
    monkeypatch.setenv("FPD_SEED", "17")
    cfg = load_config(p, overrides=["epochs=1"], echo=False)
    assert (cfg.lr, cfg.epochs, cfg.seed) == (0.5, 1, 17)
    assert load_config(None, overrides=["seed=2"], echo=False).seed == 2


def test_optional_and_bool_values():
    cfg = load_config(None, overrides=["eval_delta = none", "attack_random_init = true"], echo=False)
    assert cfg.eval_delta is None and cfg.attack_random_init is True
    assert load_config(None, overrides=["eval_delta=0.1"], echo=False).eval_delta == 0.1
