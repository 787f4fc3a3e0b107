import copy

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fpd import tensor as T
from fpd.arch import build_network, fpd_forward
from fpd.attacks import AttackConfig
from fpd.data import Dataset
from fpd.gradsuite import micro_config
from fpd.tensor import Tensor
from fpd.training import (OptimizerState, PhaseOptimizers, TrainConfig, adversarial_train,
                          fit_classifier, optimizer_step, perturb, sample_noise, train,
                          two_phase_step)


def micro_net(seed=0, **kw):
    return build_network(micro_config(**kw), seed=seed)


def snapshot(net):
    return {name: t.data.copy() for name, _, t in net.param_groups()}


def tags_of(net):
    return {name: tags for name, tags, _ in net.param_groups()}


def synthetic(n=16, seed=0, size=8):
    g = np.random.default_rng(seed)
    return Dataset(g.uniform(size=(n, 3, size, size)), g.integers(0, 3, size=n), num_classes=3)


# ---- noise

def test_zero_noise(rng):
    assert np.array_equal(sample_noise((3, 4), 0.0, rng), np.zeros((3, 4)))


def test_noise_range_and_determinism():
    a = sample_noise((1000,), 0.3, np.random.default_rng(4))
    b = sample_noise((1000,), 0.3, np.random.default_rng(4))
    assert np.array_equal(a, b)
    assert a.min() >= -0.3 and a.max() <= 0.3
    with pytest.raises(ValueError):
        sample_noise((2,), -0.1, np.random.default_rng(0))


@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_perturbed_inputs_are_feasible(seed, eps):
    g = np.random.default_rng(seed)
    x = g.uniform(size=(2, 3, 4, 4))
    xn = perturb(x, eps, g)
    assert np.all(np.abs(xn - x) <= eps) and xn.min() >= 0 and xn.max() <= 1


# ---- optimizer

def _toy_groups(rng):
    a = T.parameter(rng.normal(size=(3,)))
    b = T.parameter(rng.normal(size=(2, 2)))
    return [("a", frozenset({"FD"}), a), ("b", frozenset({"LCC"}), b)]


def test_empty_allow_set_changes_nothing(rng):
    groups = _toy_groups(rng)
    before = [t.data.copy() for _, _, t in groups]
    for _, _, t in groups:
        t.grad = np.ones_like(t.data)
    assert optimizer_step(groups, OptimizerState(), TrainConfig(), allow_tags=set()) == 0
    for b, (_, _, t) in zip(before, groups):
        assert np.array_equal(b, t.data) and t.grad is None


def test_sgd_closed_form(rng):
    groups = _toy_groups(rng)
    theta = [t.data.copy() for _, _, t in groups]
    grads = [rng.normal(size=t.shape) for _, _, t in groups]
    for g, (_, _, t) in zip(grads, groups):
        t.grad = g.copy()
    optimizer_step(groups, OptimizerState(), TrainConfig(optimizer="sgd", lr=1.0, wd=0.0))
    for th, g, (_, _, t) in zip(theta, grads, groups):
        assert np.array_equal(t.data, th - g)


def test_decoupled_weight_decay(rng):
    groups = _toy_groups(rng)
    theta = [t.data.copy() for _, _, t in groups]
    for _, _, t in groups:
        t.grad = np.zeros_like(t.data)
    optimizer_step(groups, OptimizerState(), TrainConfig(optimizer="sgd", lr=0.1, wd=0.5))
    for th, (_, _, t) in zip(theta, groups):
        np.testing.assert_allclose(t.data, th - 0.1 * 0.5 * th, rtol=1e-15)


def reference_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return theta


def test_adam_matches_reference(rng):
    p = T.parameter(rng.normal(size=(4,)))
    start = p.data.copy()
    grads = [rng.normal(size=4) for _ in range(5)]
    state, cfg = OptimizerState(), TrainConfig(lr=0.01)
    for g in grads:
        p.grad = g.copy()
        optimizer_step([("p", frozenset({"FD"}), p)], state, cfg)
    np.testing.assert_allclose(p.data, reference_adam(start, grads, 0.01), rtol=0, atol=1e-10)
    assert state.step == 5


def test_missing_gradient_raises(rng):
    groups = _toy_groups(rng)
    groups[0][2].grad = np.zeros(3)
    with pytest.raises(ValueError, match="b"):
        optimizer_step(groups, OptimizerState(), TrainConfig())


def test_tag_filter(rng):
    groups = _toy_groups(rng)
    before = groups[1][2].data.copy()
    groups[0][2].grad = np.ones(3)
    optimizer_step(groups, OptimizerState(), TrainConfig(optimizer="sgd"), allow_tags={"FD"})
    assert np.array_equal(groups[1][2].data, before)


# ---- two-phase step

def test_freeze_phase_leaves_mid_and_lcc_untouched(rng):
    net = micro_net()
    x = rng.uniform(size=(4, 3, 8, 8))
    y = np.array([0, 1, 2, 0])
    before, tags = snapshot(net), tags_of(net)
    res = two_phase_step(net, x, y, TrainConfig(threshold_t=1e-9), PhaseOptimizers(), rng=rng)
    after = snapshot(net)
    assert res.phase == "freeze" and res.updates == 1
    for name, tg in tags.items():
        if tg & {"MID", "LCC"}:
            assert np.array_equal(before[name], after[name]), name
    changed = {name for name in tags if not np.array_equal(before[name], after[name])}
    assert any("FD" in tags[n] for n in changed)
    assert any("R" in tags[n] for n in changed)
    assert res.objectives[0] == pytest.approx(res.l2, abs=1e-12)


def test_full_phase_objective_composition(rng):
    cfg = TrainConfig(threshold_t=10.0, alpha1=0.7, alpha2=1.3)
    net = micro_net(seed=1)
    ref = copy.deepcopy(net)
    x = rng.uniform(size=(4, 3, 8, 8))
    xin = perturb(x, cfg.eps, rng)
    y = np.array([2, 1, 0, 0])
    res = two_phase_step(net, x, y, cfg, PhaseOptimizers(), x_input=xin)
    assert res.phase == "full" and res.updates == 2
    with T.no_grad():
        out = fpd_forward(Tensor(xin), ref)
        l1 = float(T.cross_entropy(out.logits, y).data)
        l2 = float(T.l2_loss(Tensor(x), out.restored).data)
    assert res.objectives[0] == pytest.approx(0.7 * l1 + 1.3 * l2, abs=1e-12)
    l1b, l2b = res.second
    assert res.objectives[1] == pytest.approx(0.7 * l1b + 1.3 * l2b, abs=1e-12)
    moved = sum(not np.array_equal(a, b) for a, b in zip(snapshot(ref).values(), snapshot(net).values()))
    assert moved == len(net.param_groups())


def test_full_phase_updates_every_group_twice(rng):
    net = micro_net(seed=2)
    opt = PhaseOptimizers()
    two_phase_step(net, rng.uniform(size=(2, 3, 8, 8)), np.array([0, 1]), TrainConfig(threshold_t=10.0), opt,
                   rng=rng)
    assert set(opt.joint.steps.values()) == {2}
    assert not opt.restore.steps


def test_step_needs_input_or_rng():
    with pytest.raises(ValueError):
        two_phase_step(micro_net(), np.zeros((1, 3, 8, 8)), np.array([0]), TrainConfig(), PhaseOptimizers())


# ---- loops

def test_training_is_deterministic():
    data = synthetic()
    cfg = TrainConfig(epochs=2, batch_size=8, seed=3, threshold_t=0.08)
    a, ha = train(micro_net(seed=4), data, cfg)
    b, hb = train(micro_net(seed=4), data, cfg)
    assert ha == hb
    for (_, _, ta), (_, _, tb) in zip(a.param_groups(), b.param_groups()):
        assert np.array_equal(ta.data, tb.data)
    assert len(ha) == 2 and ha[0].freeze_steps + ha[0].full_steps == 2


def test_zero_eps_adversarial_training_matches_plain_training():
    data = synthetic(seed=1)
    cfg = TrainConfig(epochs=1, batch_size=8, eps=0.0, seed=5, threshold_t=10.0)
    a, _ = train(micro_net(seed=6), data, cfg)
    b, _ = adversarial_train(micro_net(seed=6), data, cfg, AttackConfig("pgd", "linf", 0.0, steps=2, step_size=0.1))
    for (_, _, ta), (_, _, tb) in zip(a.param_groups(), b.param_groups()):
        assert np.array_equal(ta.data, tb.data)


def test_adversarial_batches_are_feasible(monkeypatch):
    import fpd.training as tr

    seen = []
    real = tr.two_phase_step

    def spy(net, x, y, cfg, opt, x_input=None, rng=None):
        seen.append((x.copy(), x_input.copy()))
        return real(net, x, y, cfg, opt, x_input, rng)

    monkeypatch.setattr(tr, "two_phase_step", spy)
    acfg = AttackConfig("fgsm", "linf", 0.2)
    adversarial_train(micro_net(), synthetic(n=8), TrainConfig(epochs=1, batch_size=4), acfg)
    assert len(seen) == 2
    for x, xa in seen:
        assert np.abs(xa - x).max() <= 0.2 + 1e-9 and xa.min() >= 0 and xa.max() <= 1


def test_plain_classifier_fit_reduces_loss():
    data = synthetic(n=24, seed=2)
    plain = build_network(micro_config(kind="plain"), seed=0)
    hist = fit_classifier(plain, data, TrainConfig(epochs=15, batch_size=8, eps=0.0, lr=1e-2))
    assert hist[-1].mean_l1 < hist[0].mean_l1


def test_reference_adversarial_config_parses():
    cfg = TrainConfig(adversarial="pgd", attack_eps=0.3, attack_steps=100, attack_step_size=0.01)
    acfg = cfg.attack_config()
    assert (acfg.kind, acfg.eps, acfg.steps, acfg.step_size) == ("pgd", 0.3, 100, 0.01)


@pytest.mark.parametrize("kw", [dict(epochs=0), dict(eps=-0.1), dict(threshold_t=0.0), dict(optimizer="rmsprop"),
                                dict(batch_size=0), dict(model="vit"), dict(adversarial="cw"),
                                dict(adversarial="pgd", attack_steps=0)])
def test_config_invariants(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)
