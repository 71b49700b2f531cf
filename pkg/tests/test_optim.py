import numpy as np
import pytest
from hypothesis import given, strategies as st

from tflimits import model as m
from tflimits import optim as o
from tflimits.diffcore import ContractError
from tflimits.tasks import make_regression


def test_scaled_lr_table():
    assert abs(o.scaled_lr("sgd", 0.1, 16, 16, 4, 1.0) - 102.4) < 1e-12
    assert abs(o.scaled_lr("sgd", 0.3, 5, 7, 1, 0.5) - 0.3 * 35) < 1e-12
    assert abs(o.scaled_lr("sgd", 0.3, 5, 7, 1, 1.0) - 0.3 * 35) < 1e-12
    assert abs(o.scaled_lr("adam", 0.001, 64, 8, 16, 1.0) - 4.419417e-5) < 1e-8


@given(st.floats(1e-4, 10), st.floats(1e-4, 10), st.sampled_from(["sgd", "adam"]), st.sampled_from([0.5, 0.75, 1.0]))
def test_scaled_lr_linear_in_eta0(a, b, kind, alpha_L):
    lhs = o.scaled_lr(kind, a * b, 8, 4, 6, alpha_L)
    rhs = a * o.scaled_lr(kind, b, 8, 4, 6, alpha_L)
    assert abs(lhs - rhs) <= 1e-12 * abs(rhs)


def test_lr_includes_gamma0():
    cfg = m.ModelConfig(gamma0=3.0)
    base = o.lr_for(cfg, o.OptimizerConfig())
    assert abs(o.lr_for(cfg, o.OptimizerConfig(lr_includes_gamma0=True)) - 9 * base) < 1e-12


def test_group_multipliers():
    g = o.group_multipliers("sgd", 1, 1.0)
    assert all(v["forward"] == 1.0 for v in g.values())
    assert abs(o.group_multipliers("sgd", 16, 4.0)["read_in"]["forward"] - 0.5) < 1e-15
    g = o.group_multipliers("adam", 16, 4.0, adam_scale=1, width=64)
    assert abs(g["read_in"]["forward"] - 8.0) < 1e-12
    assert g["bulk"]["forward"] == 1.0


def test_every_param_has_one_group():
    names = m.init_params(m.ModelConfig(L=3), 0).names()
    assert {m.param_group(n) for n in names} == set(o.GROUPS)


def test_sgd_examples():
    p = {"w": np.array([1.0])}
    new, _ = o.sgd_step(p, {"w": np.array([0.0])}, 0.1)
    assert new["w"][0] == 1.0
    new, _ = o.sgd_step(p, {"w": np.array([2.0])}, 0.1)
    assert abs(new["w"][0] - 0.8) < 1e-15


def test_sgd_momentum_unroll():
    p, g, lr = {"w": np.array([1.0])}, {"w": np.array([2.0])}, 0.1
    p1, s = o.sgd_step(p, g, lr, 0.9)
    p2, _ = o.sgd_step(p1, g, lr, 0.9, s)
    assert abs((1.0 - p2["w"][0]) - lr * 2.0 * (1 + 1.9)) < 1e-14


def test_adam_first_step_is_sign_step(rng):
    g = {"w": rng.standard_normal(20) * 1e-2}
    p = {"w": np.zeros(20)}
    cfg = o.OptimizerConfig(kind="adam", adam_eps=1e-12)
    new, _ = o.adam_step(p, g, 1e-3, cfg)
    np.testing.assert_allclose(np.abs(new["w"]), 1e-3, rtol=1e-6)
    new2, _ = o.adam_step(p, {"w": 2 * g["w"]}, 1e-3, cfg)
    np.testing.assert_allclose(new2["w"], new["w"], rtol=1e-6)


def test_adam_zero_grad():
    p = {"w": np.array([1.0, -2.0])}
    new, _ = o.adam_step(p, {"w": np.zeros(2)}, 0.1, o.OptimizerConfig(kind="adam"))
    np.testing.assert_array_equal(new["w"], p["w"])


def test_adam_constant_gradient_fixed_point():
    cfg = o.OptimizerConfig(kind="adam")
    p, state = {"w": np.zeros(1)}, None
    for _ in range(100):
        prev = p["w"][0]
        p, state = o.adam_step(p, {"w": np.array([0.3])}, 0.01, cfg, state)
    assert abs(abs(p["w"][0] - prev) - 0.01) < 1e-4


def test_non_finite_gradient_is_reported():
    with pytest.raises(m.NumericError):
        o.sgd_step({"w": np.zeros(1)}, {"w": np.array([np.nan])}, 0.1)


def test_optimizer_config_validation():
    with pytest.raises(ContractError):
        o.OptimizerConfig(kind="rmsprop")
    with pytest.raises(ContractError):
        o.OptimizerConfig(adam_beta2=1.0)


CFG = m.ModelConfig(N=2, H=2, L=2, S=3, D=4)


def _data():
    return make_regression(0, 8, CFG.S, CFG.D, 1.0)


def test_train_zero_steps():
    p = m.init_params(CFG, 0)
    out, log = o.train(p, CFG, o.OptimizerConfig(steps=0), _data())
    assert out.equal(p) and log.losses == []


@pytest.mark.parametrize("momentum", [0.0, 0.9])
def test_train_equals_manual_loop(momentum):
    opt = o.OptimizerConfig(steps=3, eta0=0.05, momentum=momentum)
    p, ds = m.init_params(CFG, 0), _data()
    out, log = o.train(p, CFG, opt, ds)
    lr = o.lr_for(CFG, opt)
    theta, state, losses = dict(p.tensors), {}, []
    for step in range(3):
        x, y = ds.batch(step)
        loss, grads, _ = m.loss_and_grads(m.Params(theta), CFG, x, y, "mse")
        losses.append(loss)
        theta, state = o.sgd_step(theta, grads, lr, momentum, state)
    assert log.losses == losses
    assert out.equal(m.Params(theta))
    assert p.equal(m.init_params(CFG, 0))


def test_train_adam_equals_manual_loop():
    opt = o.OptimizerConfig(kind="adam", steps=2, eta0=0.01)
    cfg = CFG.with_(adam_scale=1)
    p, ds = m.init_params(cfg, 0), _data()
    out, _ = o.train(p, cfg, opt, ds)
    theta, state = dict(p.tensors), None
    for step in range(2):
        x, y = ds.batch(step)
        _, grads, _ = m.loss_and_grads(m.Params(theta), cfg, x, y, "mse")
        theta, state = o.adam_step(theta, grads, o.lr_for(cfg, opt), opt, state)
    assert out.equal(m.Params(theta))


def test_train_deterministic():
    opt = o.OptimizerConfig(steps=4)
    a = o.train(m.init_params(CFG, 0), CFG, opt, _data())
    b = o.train(m.init_params(CFG, 0), CFG, opt, _data())
    assert a[1].losses == b[1].losses and a[0].equal(b[0])


def test_train_probe_hook_steps():
    seen = []
    o.train(m.init_params(CFG, 0), CFG, o.OptimizerConfig(steps=3), _data(),
            probes={"p": ([0, 3], lambda step, params, trace: seen.append((step, trace is None)) or {})})
    assert seen == [(0, False), (3, True)]


def test_train_records_divergence():
    opt = o.OptimizerConfig(steps=30, eta0=1e8)
    _, log = o.train(m.init_params(CFG, 0), CFG, opt, make_regression(0, 8, 3, 4, 50.0))
    assert log.diverged and log.diverged_at == len(log.losses)


def test_linear_regression_gd_monotone():
    # The readout alone is a linear model in wL: train only wL with every
    # other gradient masked, lr below 2 / lambda_max of its Gram.
    cfg = CFG
    p, ds = m.init_params(cfg, 0), _data()
    x, y = ds.full()
    _, tr = m.forward(p, cfg, x)
    hf = np.array([[ (r - r.mean()) / np.sqrt(np.var(r) + cfg.eps_ln) for r in b] for b in tr.h[-1]]).mean(1)
    phi = hf * m.edge_multiplier(cfg) / (cfg.gamma0 * cfg.width)
    lam = np.linalg.eigvalsh(phi.T @ phi / len(phi)).max()
    lr = 1.0 / lam
    theta = dict(p.tensors)
    losses = []
    for _ in range(10):
        loss, grads, _ = m.loss_and_grads(m.Params(theta), cfg, x, y, "mse")
        losses.append(loss)
        grads = {k: (g if k == "wL" else np.zeros_like(g)) for k, g in grads.items()}
        theta, _ = o.sgd_step(theta, grads, lr)
    assert all(b < a for a, b in zip(losses, losses[1:]))
