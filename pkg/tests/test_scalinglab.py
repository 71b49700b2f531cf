import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tflimits import model as m
from tflimits import scalinglab as sl
from tflimits.diffcore import ContractError
from tflimits.optim import OptimizerConfig
from tflimits.tasks import DataSpec

BASE = m.ModelConfig(N=2, H=2, L=1, S=3, D=4)
DATA = DataSpec(n_samples=4)


# ---------------------------------------------------------------- fits

def test_fit_exact_cubic():
    xs = [1, 2, 4, 8]
    f = sl.fit_power_law([(x, 7 * x**3) for x in xs])
    assert abs(f.exponent - 3) < 1e-10 and f.r_squared == 1.0
    assert abs(math.exp(f.log_intercept) - 7) < 1e-9
    np.testing.assert_allclose(f.predict(16), 7 * 16**3)


def test_fit_constant():
    f = sl.fit_power_law([(x, 2.5) for x in (1, 3, 9)])
    assert abs(f.exponent) < 1e-12


def test_fit_noisy_inverse_square():
    r = np.random.default_rng(0)
    xs = [2, 4, 8, 16, 32]
    f = sl.fit_power_law([(x, x**-2.0 * math.exp(0.01 * r.standard_normal())) for x in xs])
    assert abs(f.exponent + 2) < 0.1


def test_fit_rejects_bad_points():
    with pytest.raises(ContractError, match="offending"):
        sl.fit_power_law([(1, 1.0), (2, 0.0), (3, 1.0)])
    with pytest.raises(ContractError):
        sl.fit_power_law([(1, 1.0), (2, float("nan")), (3, 1.0)])
    with pytest.raises(ContractError):
        sl.fit_power_law([(1, 1.0), (2, 2.0)])
    with pytest.raises(ContractError):
        sl.fit_power_law([(1, 1.0), (1, 2.0), (2, 1.0)])


@given(st.floats(-3, 3), st.floats(0.1, 10), st.integers(1, 4))
def test_seed_averaging_keeps_noiseless_fit(p, c, reps):
    pts = [(x, c * x**p) for x in (2, 3, 5, 7) for _ in range(reps)]
    a = sl.fit_power_law(pts, average_seeds=True)
    b = sl.fit_power_law(pts, average_seeds=False)
    assert abs(a.exponent - p) < 1e-9 and abs(b.exponent - p) < 1e-9


def test_fit_rows_skips_diverged():
    rows = [sl.Row("e", "N", x, 0, 1, "y", float(x)) for x in (1, 2, 4)]
    rows.append(sl.Row("e", "N", 8, 0, 1, "y", 1e9, diverged=True))
    assert abs(sl.fit_rows(rows, "y").exponent - 1) < 1e-12


# ---------------------------------------------------------------- sweeps

def spec(values=(2, 3, 4), seeds=(0, 1), steps=2, measure_at=(0, 2), probe="loss"):
    return sl.SweepSpec("N", values, BASE, OptimizerConfig(steps=steps), seeds, probe, measure_at, DATA)


def test_sweep_single_row():
    assert len(sl.run_sweep(spec((2,), (0,), 1, (1,)))) == 1


def test_sweep_cardinality():
    rows = sl.run_sweep(spec())
    assert len(rows) == 12
    assert {r.metric for r in rows} == {"loss"}
    assert rows == sorted(rows, key=sl.Row.key)


def test_sweep_deterministic():
    assert sl.run_sweep(spec(probe="attn")) == sl.run_sweep(spec(probe="attn"))


def test_sweep_metric_filter():
    s = sl.SweepSpec("H", (2, 3), BASE, OptimizerConfig(steps=1), (0,), "attn", (1,), DATA, metrics=("var_A",))
    assert {r.metric for r in sl.run_sweep(s)} == {"var_A"}


def test_sweep_spec_validation():
    with pytest.raises(ContractError):
        spec(values=(4, 2))
    with pytest.raises(ContractError):
        spec(seeds=())
    with pytest.raises(ContractError):
        spec(probe="nope")
    with pytest.raises(ContractError):
        spec(measure_at=(5,))


def test_divergent_trial_is_marked():
    s = sl.SweepSpec("N", (2,), BASE, OptimizerConfig(steps=30, eta0=1e8), (0,), "loss", (30,),
                     DataSpec(n_samples=4, teacher_scale=50.0))
    rows = sl.run_sweep(s)
    assert rows and all(r.diverged for r in rows)


# ---------------------------------------------------------------- ensemble

def test_ensemble_identical_seeds():
    x = DATA.build(BASE.S, BASE.D).inputs
    single = m.forward(m.init_params(BASE, 3), BASE, x)[0]
    np.testing.assert_array_equal(sl.ensemble_proxy(BASE, [3, 3, 3], x), single)


def test_ensemble_opposite_logits():
    z = np.array([[0.3], [-1.7]])
    assert np.all(sl.ensemble_mean([z, -z]) == 0)


def test_ensemble_seed_order():
    x = DATA.build(BASE.S, BASE.D).inputs
    a = sl.ensemble_proxy(BASE, [4, 1, 7, 2], x)
    b = sl.ensemble_proxy(BASE, [2, 7, 1, 4], x)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ContractError):
        sl.ensemble_proxy(BASE, [1], x)


# ---------------------------------------------------------------- experiments

def test_head_collapse_needs_heads():
    with pytest.raises(ContractError):
        sl.head_collapse_experiment(BASE, (2, 4, 8), 1.0, 1)


def test_head_collapse_init_exponent():
    res = sl.head_collapse_experiment(BASE.with_(H=8), (4, 16, 64), 1.0, 0, seeds=(0, 1, 2, 3), data=DATA)
    assert abs(res.fits["head_var"].exponent + 1) < 0.15


def test_kernel_convergence_single_value():
    with pytest.raises(ContractError):
        sl.kernel_convergence_experiment(BASE, (4,))


def test_kernel_convergence_shared_index():
    res = sl.kernel_convergence_experiment(BASE, (1, 2, 4, 8), seeds=(0, 1), ref_seeds=(100, 101),
                                           data=DataSpec(n_samples=4))
    assert len(res.rows) == 8 and all(r.metric_value > 0 for r in res.rows)


def test_logit_convergence_seed_variance_positive():
    res = sl.logit_convergence_experiment(BASE, (1, 2, 4), 1, seeds=(100,), proxy_seeds=(100, 101, 102),
                                          data=DATA)
    top = [r for r in res.rows if r.value == 4]
    assert top[0].metric_value > 0


def test_update_scaling_needs_two_steps():
    with pytest.raises(ContractError):
        sl.update_scaling_experiment(BASE, (2, 4, 8), 1.0, t_steps=1)


def test_update_scaling_zero_lr_rejected():
    with pytest.raises(ContractError, match="offending"):
        sl.update_scaling_experiment(BASE, (2, 4, 8), 1.0, 2, seeds=(0,),
                                     optim=OptimizerConfig(eta0=0.0), data=DATA)


def test_deep_linear_predictions():
    assert abs(sl.dmft_prediction(3, 0.1, 1.0) - 1.14) < 1e-12
    assert abs(sl.dmft_prediction(8, 0.1, 1.0) - 3.04) < 1e-12
    assert abs(sl.naive_prediction(8, 0.1, 1.0) - 1.08) < 1e-12


def test_deep_linear_zero_lr():
    res = sl.deep_linear_response_check(256, (2, 4), 0.0, 1.0, seeds=tuple(range(32)))
    for row in sl.deep_linear_table(res):
        assert abs(row["H_L_mean"] - 1) < 4 * row["H_L_sem"] + 1e-12
        assert row["dmft"] == row["naive"] == 1.0


def test_first_step_update_is_suppressed():
    # At alpha_A = 1 the key / pre-attention updates only reach their
    # width-independent size after a few steps.
    base = m.ModelConfig(N=2, H=2, L=2, S=4, D=8, beta0=2.0)
    s = sl.SweepSpec("N", (8, 32, 128), base, OptimizerConfig(eta0=0.25, steps=5), (0, 1, 2, 3), "update",
                     (1, 5), DataSpec(teacher_scale=4.0))
    rows = sl.run_sweep(s)
    for metric in ("rms_dk_w", "rms_dA_w"):
        first, later = sl.fit_rows(rows, metric, 1).exponent, sl.fit_rows(rows, metric, 5).exponent
        assert first < -0.3 and abs(later) < 0.3


def test_stability_records_both_fits():
    res = sl.stability_probe(BASE, (4, 8, 16), 1.0, steps=2, seeds=(0,), data=DATA)
    assert set(res.fits) == {"g_kq", "g_change"}
    assert {r.step for r in res.rows} == {0, 2}


def test_result_csv_layout():
    res = sl.init_scales_experiment(BASE, (2, 4, 8), 1.0, seeds=(0,), data=DATA)
    lines = sl.result_csv(res).splitlines()
    assert lines[0] == ",".join(sl.CSV_COLUMNS)
    assert any(ln.startswith("init_scales,N,,,,fit.var_A.exponent,") for ln in lines)
    row = lines[1].split(",")
    assert float(row[6]) == res.rows[0].metric_value
