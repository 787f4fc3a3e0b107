import csv

import pytest

from fpd.cli import main
from fpd.data import load_checkpoint

TINY = ["image_size=8", "epochs=1", "batch_size=16", "train_limit=32", "dtype=float64"]


def _overrides(items):
    out = []
    for o in items:
        out += ["--override", o]
    return out


@pytest.fixture(scope="module")
def trained(tiny_mnist_dir, tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    ck = d / "net.ck"
    assert main(["train", "--data", str(tiny_mnist_dir), "--out", str(ck), *_overrides(TINY)]) == 0
    return ck


def test_train_writes_loadable_checkpoint_and_history(trained):
    net = load_checkpoint(trained)
    assert net.config.image_size == 8
    rows = list(csv.DictReader(open(str(trained) + ".history.csv")))
    assert len(rows) == 1 and int(rows[0]["freeze_steps"]) + int(rows[0]["full_steps"]) == 2


def test_train_is_reproducible(tiny_mnist_dir, trained, tmp_path):
    ck = tmp_path / "again.ck"
    assert main(["train", "--data", str(tiny_mnist_dir), "--out", str(ck), *_overrides(TINY)]) == 0
    assert ck.read_bytes() == trained.read_bytes()


def test_attack_appends_metrics_row(tiny_mnist_dir, trained, tmp_path, capsys):
    m = tmp_path / "m.csv"
    args = ["attack", "--checkpoint", str(trained), "--data", str(tiny_mnist_dir), "--attack", "pgd",
            "--norm", "linf", "--eps", "0.3", "--steps", "2", "--step-size", "0.01", "--metrics", str(m),
            "--limit", "16"]
    assert main(args) == 0
    out = capsys.readouterr().out
    assert "kind = pgd" in out
    rows = list(csv.DictReader(open(m)))
    assert len(rows) == 1 and rows[0]["attack"] == "pgd" and rows[0]["n_samples"] == "16"


def test_zero_eps_attack_reports_clean_accuracy(tiny_mnist_dir, trained, tmp_path):
    m = tmp_path / "m.csv"
    main(["eval", "--checkpoint", str(trained), "--data", str(tiny_mnist_dir), "--metrics", str(m), "--limit", "16"])
    main(["attack", "--checkpoint", str(trained), "--data", str(tiny_mnist_dir), "--eps", "0", "--steps", "2",
          "--metrics", str(m), "--limit", "16"])
    rows = list(csv.DictReader(open(m)))
    assert rows[0]["accuracy"] == rows[1]["accuracy"]


def test_transfer_mode(tiny_mnist_dir, trained, tmp_path):
    sub = tmp_path / "sub.ck"
    assert main(["train", "--data", str(tiny_mnist_dir), "--out", str(sub),
                 *_overrides(TINY + ["model=substitute"])]) == 0
    m = tmp_path / "m.csv"
    assert main(["attack", "--checkpoint", str(trained), "--data", str(tiny_mnist_dir), "--substitute", str(sub),
                 "--attack", "fgsm", "--eps", "0.2", "--metrics", str(m), "--limit", "16"]) == 0
    assert list(csv.DictReader(open(m)))[0]["attack"] == "transfer-fgsm"


def test_incompatible_substitute_fails(tiny_mnist_dir, trained, tmp_path, capsys):
    sub = tmp_path / "sub16.ck"
    main(["train", "--data", str(tiny_mnist_dir), "--out", str(sub),
          *_overrides(TINY[1:] + ["image_size=16", "model=substitute"])])
    code = main(["attack", "--checkpoint", str(trained), "--data", str(tiny_mnist_dir), "--substitute", str(sub)])
    assert code != 0 and "input shape" in capsys.readouterr().err


def test_bad_config_key_fails(tiny_mnist_dir, tmp_path, capsys):
    code = main(["train", "--data", str(tiny_mnist_dir), "--out", str(tmp_path / "x.ck"), "--override", "foo=1"])
    assert code == 1 and "valid keys" in capsys.readouterr().err


def test_missing_checkpoint_fails(tiny_mnist_dir, tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "nope.ck"), "--data", str(tiny_mnist_dir)]) == 1


def test_bound_check_is_deterministic(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["bound-check", "--trials", "200", "--seed", "7", "--out", str(a)]) == 0
    assert main(["bound-check", "--trials", "200", "--seed", "7", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_unconstrained_bound_check_exits_zero(capsys):
    assert main(["bound-check", "--trials", "300", "--regime", "unconstrained"]) == 0
    assert "violations:" in capsys.readouterr().out


def test_gradcheck_subset(capsys):
    assert main(["gradcheck", "--seeds", "2", "--only", "nonlocal_dot", "lcc_head"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 2


def test_gradcheck_unknown_name():
    assert main(["gradcheck", "--only", "nope"]) == 2
