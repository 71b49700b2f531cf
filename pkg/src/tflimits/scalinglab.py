"""Size sweeps over N / H / L, power-law fits and the finite-size experiments.

Every experiment is a pure function of its arguments and seeds. Trials are
independent; set TFLIMITS_WORKERS > 1 to run them in worker processes (the
result table is always assembled in sorted order).
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as m
from . import probes as pr
from .diffcore import ContractError
from .model import ModelConfig, NumericError, Params
from .optim import OptimizerConfig, sgd_step, train
from .tasks import DataSpec

AXES = ("N", "H", "L")
CSV_COLUMNS = ("experiment", "axis", "value", "seed", "step", "metric", "metric_value", "diverged")


@dataclass(frozen=True)
class Row:
    experiment: str
    axis: str
    value: int
    seed: int
    step: int
    metric: str
    metric_value: float
    diverged: bool = False

    def key(self):
        return (self.value, self.seed, self.step, self.metric)


@dataclass(frozen=True)
class FitResult:
    exponent: float
    log_intercept: float
    r_squared: float
    n_points: int

    def predict(self, x):
        return np.exp(self.log_intercept) * np.asarray(x, dtype=np.float64) ** self.exponent


@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: tuple[int, ...]
    base: ModelConfig
    optim: OptimizerConfig
    seeds: tuple[int, ...]
    probe: str
    measure_at: tuple[int, ...]
    data: DataSpec = DataSpec()
    probe_args: tuple[tuple[str, object], ...] = ()
    name: str = "sweep"
    metrics: tuple[str, ...] = ()  # empty keeps every metric the probe reports

    def __post_init__(self):
        if self.axis not in AXES:
            raise ContractError(f"axis must be one of {AXES}, got {self.axis!r}")
        if not self.values or any(int(v) < 1 for v in self.values):
            raise ContractError("sweep values must be positive integers")
        if any(b <= a for a, b in zip(self.values, self.values[1:])):
            raise ContractError("sweep values must be strictly ascending")
        if not self.seeds:
            raise ContractError("sweep needs at least one seed")
        if self.probe not in PROBES:
            raise ContractError(f"unknown probe {self.probe!r}; choose from {sorted(PROBES)}")
        bad = [s for s in self.measure_at if not 0 <= s <= self.optim.steps]
        if bad or not self.measure_at:
            raise ContractError(f"measure_at must be a nonempty subset of [0, {self.optim.steps}], got {bad}")

    @property
    def steps(self) -> int:
        return self.optim.steps

    @property
    def steps_sorted(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.measure_at)))


@dataclass
class ExperimentResult:
    name: str
    axis: str
    rows: list[Row]
    fits: dict[str, FitResult] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def n_diverged(self) -> int:
        return len({(r.value, r.seed) for r in self.rows if r.diverged})


# ---------------------------------------------------------------- probes


@dataclass
class _Context:
    config: ModelConfig
    p0: Params
    x: np.ndarray
    trace0: m.ActivationTrace
    args: dict
    g0: list | None = None


def _rms(x) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def _probe_attn(ctx, params, trace):
    return {
        "var_A": float(np.mean([pr.attn_head_variance(trace, i + 1) for i in range(len(trace.A))])),
        "rms_k": _rms(np.concatenate([k.ravel() for k in trace.k])),
    }


def _probe_head_variance(ctx, params, trace):
    layers = ctx.args.get("layer")
    layers = [layers] if layers else range(1, len(trace.A) + 1)
    return {"head_var": float(np.mean([pr.attn_head_variance(trace, i) for i in layers]))}


def _probe_update(ctx, params, trace):
    return pr.update_meters(ctx.p0, params, ctx.trace0, trace)


def _probe_kernel_dev(ctx, params, trace):
    # Final residual stream against the embedding stream, every position.
    L = ctx.config.L
    top = pr.residual_kernel(trace, L + 1).values
    bottom = pr.residual_kernel(trace, 1).values
    return {"kernel_dev": float(np.mean((top - bottom) ** 2))}


def _probe_backward(ctx, params, trace):
    # g_change isolates what training added to the backward signal; the
    # skip path alone keeps g itself Theta(1).
    tr = m.output_backward(params, ctx.config, ctx.x)
    if ctx.g0 is None:
        ctx.g0 = tr.g
    per_layer = [_rms(g) for g in tr.g]
    change = max(_rms(g - g0) for g, g0 in zip(tr.g, ctx.g0))
    kq = max(_rms(g) for g in tr.g_kq)
    return {"g_rms_max": max(per_layer), "g_change": change, "g_kq": kq}


def _probe_loss(ctx, params, trace):
    return {}


PROBES = {
    "attn": _probe_attn,
    "head_variance": _probe_head_variance,
    "update": _probe_update,
    "kernel_dev": _probe_kernel_dev,
    "backward": _probe_backward,
    "loss": _probe_loss,
}


# ---------------------------------------------------------------- sweeps


def _trial(spec: SweepSpec, value: int, seed: int) -> list[Row]:
    config = spec.data.shape_config(spec.base.with_(**{spec.axis: int(value)}))
    ds = spec.data.build(config.S, config.D)
    x = ds.inputs
    p0 = m.init_params(config, seed)
    args = dict(spec.probe_args)
    fn = PROBES[spec.probe]
    rows: list[Row] = []
    when = spec.steps_sorted

    def emit(step, metrics, diverged=False):
        for name in sorted(metrics):
            if spec.metrics and name not in spec.metrics:
                continue
            rows.append(Row(spec.name, spec.axis, int(value), int(seed), int(step), name,
                            float(metrics[name]), diverged))

    ctx = None

    def probe(step, params, _train_trace):
        nonlocal ctx
        logits, trace = m.forward(params, config, x)
        if ctx is None:
            ctx = _Context(config, p0, x, trace, args)
        out = dict(fn(ctx, params, trace))
        out["loss"] = m.loss_tensor(m.dc.constant(logits), ds.targets, ds.loss_kind).item()
        emit(step, out)
        return out

    # The step-0 probe also builds the reference trace used by update meters.
    hooks = {"probe": (sorted(set(when) | {0}), probe)}
    try:
        _, log = train(p0, config, spec.optim, ds, probes=hooks)
        diverged_at = log.diverged_at
    except (NumericError, FloatingPointError):
        diverged_at = 0
    if 0 not in when:
        rows = [r for r in rows if r.step != 0]
    if diverged_at is not None:
        done = {r.step for r in rows}
        for step in when:
            if step not in done:
                for name in spec.metrics or ("loss",):
                    rows.append(Row(spec.name, spec.axis, int(value), int(seed), int(step), name, math.nan, True))
        rows = [replace(r, diverged=True) if r.step >= diverged_at else r for r in rows]
    return rows


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("TFLIMITS_WORKERS", "1")))
    except ValueError:
        return 1


def _run_trials(fn, jobs: list[tuple]) -> list:
    n = _workers()
    if n > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n) as pool:
            return list(pool.map(fn, *zip(*jobs)))
    return [fn(*j) for j in jobs]


def run_sweep(spec: SweepSpec) -> list[Row]:
    """One row per (value, seed, measure step) and reported metric, sorted."""
    jobs = [(spec, v, s) for v in spec.values for s in spec.seeds]
    rows = [r for batch in _run_trials(_trial, jobs) for r in batch]
    return sorted(rows, key=Row.key)


# ---------------------------------------------------------------- fits


def fit_power_law(points, average_seeds: bool = True) -> FitResult:
    """OLS of ln y on ln x; with ``average_seeds`` y is first averaged per x."""
    pts = [(float(x), float(y)) for x, y in points]
    bad = [(x, y) for x, y in pts if not (y > 0 and math.isfinite(y))]
    if bad:
        raise ContractError(f"power-law fit needs finite y > 0; offending points: {bad}")
    if any(x <= 0 for x, _ in pts):
        raise ContractError("power-law fit needs x > 0")
    if average_seeds:
        by_x: dict[float, list[float]] = {}
        for x, y in pts:
            by_x.setdefault(x, []).append(y)
        pts = [(x, float(np.mean(ys))) for x, ys in sorted(by_x.items())]
    if len({x for x, _ in pts}) < 3:
        raise ContractError("power-law fit needs at least 3 distinct x values")
    lx = np.log([x for x, _ in pts])
    ly = np.log([y for _, y in pts])
    A = np.stack([lx, np.ones_like(lx)], axis=1)
    (slope, icpt), *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = ly - (slope * lx + icpt)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 if ss_tot <= 1e-30 * max(1.0, float(np.sum(ly**2))) else 1.0 - float(np.sum(resid**2)) / ss_tot
    return FitResult(float(slope), float(icpt), min(1.0, max(0.0, r2)), len(pts))


def fit_rows(rows: list[Row], metric: str, step: int | None = None) -> FitResult:
    """Fit a metric against the sweep axis, skipping diverged trials."""
    pts = [(r.value, r.metric_value) for r in rows
           if r.metric == metric and not r.diverged and (step is None or r.step == step)]
    return fit_power_law(pts, average_seeds=True)


# ---------------------------------------------------------------- ensemble proxy


def ensemble_mean(outputs: list[np.ndarray]) -> np.ndarray:
    acc = np.zeros_like(np.asarray(outputs[0], dtype=np.float64))
    for z in outputs:
        acc = acc + z
    return acc / len(outputs)


def trained_logits(config: ModelConfig, seed: int, optim: OptimizerConfig, data: DataSpec, x) -> np.ndarray:
    ds = data.build(config.S, config.D)
    params, _ = train(m.init_params(config, seed), config, optim, ds)
    return m.forward(params, config, x)[0]


def ensemble_proxy(base: ModelConfig, seeds, batch, optim: OptimizerConfig | None = None,
                   data: DataSpec | None = None) -> np.ndarray:
    """Seed-averaged logits of trained models on a held-out batch.

    Seeds are summed in sorted order so any permutation gives the same bits.
    """
    seeds = sorted(int(s) for s in seeds)
    if len(seeds) < 2:
        raise ContractError("ensemble proxy needs at least 2 seeds")
    optim = optim or OptimizerConfig(steps=0)
    data = data or DataSpec()
    config = data.shape_config(base)
    outs = _run_trials(trained_logits, [(config, s, optim, data, batch) for s in seeds])
    return ensemble_mean(outs)


# ---------------------------------------------------------------- experiments


def _need_values(values, k=3):
    if len(values) < k:
        raise ContractError(f"need at least {k} sizes for an exponent fit, got {len(values)}")


def head_collapse_experiment(base: ModelConfig, values, alpha_A: float, steps: int, seeds=(0, 1),
                             optim: OptimizerConfig | None = None, data: DataSpec | None = None,
                             layer: int | None = None) -> ExperimentResult:
    """Head variance of the pre-attention variables after training, vs N."""
    if base.H < 8:
        raise ContractError("head collapse needs at least 8 heads")
    _need_values(values)
    optim = replace(optim or OptimizerConfig(), steps=steps)
    spec = SweepSpec("N", tuple(values), base.with_(alpha_A=alpha_A), optim, tuple(seeds), "head_variance",
                     (steps,), data or DataSpec(), (("layer", layer),), "head_collapse")
    rows = run_sweep(spec)
    res = ExperimentResult("head_collapse", "N", rows, meta={"alpha_A": alpha_A, "steps": steps})
    res.fits["head_var"] = fit_rows(rows, "head_var", steps)
    return res


def _init_kernel(config: ModelConfig, seed: int, x, layer: int) -> pr.Kernel:
    _, trace = m.forward(m.init_params(config, seed), config, x)
    return pr.residual_kernel(trace, layer, pooled=config.mode == "pooled_classifier")


def kernel_convergence_experiment(base: ModelConfig, values, layer: int | None = None, seeds=(0, 1, 2, 3),
                                  ref_seeds=tuple(range(100, 108)), data: DataSpec | None = None) -> ExperimentResult:
    """Init-time distance of H^layer to the seed-averaged kernel of the most heads, vs H."""
    _need_values(values, 4)
    data = data or DataSpec(n_samples=32)
    base = data.shape_config(base)
    layer = base.L if layer is None else layer
    x = data.build(base.S, base.D).inputs
    top = base.with_(H=int(values[-1]))
    refs = _run_trials(_init_kernel, [(top, s, x, layer) for s in ref_seeds])
    ref = pr.Kernel(layer, refs[0].index, ensemble_mean([k.values for k in refs]))
    jobs = [(base.with_(H=int(h)), s, x, layer) for h in values for s in seeds]
    kernels = _run_trials(_init_kernel, jobs)
    rows = [Row("kernel_convergence", "H", int(h), int(s), 0, "kernel_dist", pr.kernel_distance(k, ref))
            for (cfg, s, _, _), k, h in zip(jobs, kernels, [j[0].H for j in jobs])]
    rows.sort(key=Row.key)
    res = ExperimentResult("kernel_convergence", "H", rows, meta={"layer": layer, "ref_seeds": len(ref_seeds)})
    res.fits["kernel_dist"] = fit_rows(rows, "kernel_dist")
    return res


def logit_convergence_experiment(base: ModelConfig, values, steps_early: int, seeds=(0, 1),
                                 proxy_seeds=tuple(range(100, 108)), optim: OptimizerConfig | None = None,
                                 data: DataSpec | None = None, probe_data: DataSpec | None = None
                                 ) -> ExperimentResult:
    """MSE between each model's early-time logits and the ensemble proxy, vs H."""
    _need_values(values, 3)
    optim = replace(optim or OptimizerConfig(), steps=steps_early)
    data = data or DataSpec()
    probe_data = probe_data or replace(data, seed=data.seed + 1)
    base = data.shape_config(base)
    x = probe_data.build(base.S, base.D).inputs
    proxy = ensemble_proxy(base.with_(H=int(values[-1])), proxy_seeds, x, optim, data)
    jobs = [(base.with_(H=int(h)), s, optim, data, x) for h in values for s in seeds]
    outs = _run_trials(trained_logits, jobs)
    rows = []
    for (cfg, s, *_), z in zip(jobs, outs):
        mse = float(np.mean((z - proxy) ** 2))
        rows.append(Row("logit_convergence", "H", cfg.H, int(s), steps_early, "logit_mse", mse,
                        not math.isfinite(mse)))
    rows.sort(key=Row.key)
    res = ExperimentResult("logit_convergence", "H", rows,
                           meta={"steps_early": steps_early, "proxy_seeds": len(proxy_seeds)})
    res.fits["logit_mse"] = fit_rows(rows, "logit_mse")
    return res


def depth_experiment(base: ModelConfig, values, alpha_L: float, steps: int = 5, seeds=(0, 1),
                     optim: OptimizerConfig | None = None, data: DataSpec | None = None) -> ExperimentResult:
    """dW_K Frobenius norm after training and init kernel deviation, vs L."""
    _need_values(values)
    optim = replace(optim or OptimizerConfig(), steps=steps)
    data = data or DataSpec()
    cfg = base.with_(alpha_L=alpha_L)
    upd = run_sweep(SweepSpec("L", tuple(values), cfg, optim, tuple(seeds), "update", (steps,), data,
                              name="depth"))
    dev = run_sweep(SweepSpec("L", tuple(values), cfg, OptimizerConfig(steps=0), tuple(seeds), "kernel_dev", (0,),
                              data, name="depth"))
    rows = sorted([r for r in upd if r.metric == "fro_dW_K"] + [r for r in dev if r.metric == "kernel_dev"],
                  key=Row.key)
    res = ExperimentResult("depth", "L", rows, meta={"alpha_L": alpha_L, "steps": steps})
    res.fits["fro_dW_K"] = fit_rows(rows, "fro_dW_K", steps)
    res.fits["kernel_dev"] = fit_rows(rows, "kernel_dev", 0)
    return res


def update_scaling_experiment(base: ModelConfig, values, alpha_A: float, t_steps: int = 5, seeds=(0, 1, 2, 3),
                              optim: OptimizerConfig | None = None, data: DataSpec | None = None
                              ) -> ExperimentResult:
    """Weight-driven key and pre-attention updates after t SGD steps, vs N."""
    if t_steps < 2:
        raise ContractError("update scaling needs t_steps >= 2 (the first step is suppressed)")
    _need_values(values)
    optim = replace(optim or OptimizerConfig(), steps=t_steps)
    spec = SweepSpec("N", tuple(values), base.with_(alpha_A=alpha_A), optim, tuple(seeds), "update", (t_steps,),
                     data or DataSpec(), name="update_scaling")
    rows = [r for r in run_sweep(spec) if r.metric in ("rms_dk_w", "rms_dA_w", "rms_dk", "rms_dA", "loss")]
    res = ExperimentResult("update_scaling", "N", rows, meta={"alpha_A": alpha_A, "t_steps": t_steps})
    res.fits["rms_dk_w"] = fit_rows(rows, "rms_dk_w", t_steps)
    res.fits["rms_dA_w"] = fit_rows(rows, "rms_dA_w", t_steps)
    return res


def dmft_prediction(L: int, eta: float, gamma0: float) -> float:
    return 1.0 + eta**2 * gamma0**2 * sum(k * k for k in range(1, L + 1))


def naive_prediction(L: int, eta: float, gamma0: float) -> float:
    return 1.0 + eta**2 * gamma0**2 * L


def _deep_linear_trial(N: int, L: int, eta: float, gamma0: float, seed: int, D: int) -> float:
    cfg = ModelConfig(N=N, H=1, L=L, D=D, mode="deep_linear", gamma0=gamma0)
    params = m.init_deep_linear(cfg, seed)
    x = np.zeros(D)
    x[0] = 1.0
    _, grads = m.deep_linear_loss_and_grads(params, L, gamma0, x, 1.0)
    new, _ = sgd_step(params.tensors, grads, eta * gamma0**2 * N)
    _, hs = m.forward_deep_linear(Params(new), L, gamma0, x)
    return float(hs[-1] @ hs[-1] / N)


def deep_linear_response_check(N: int = 1024, values=(3, 8), eta: float = 0.1, gamma0: float = 1.0,
                               seeds=tuple(range(128)), D: int = 16) -> ExperimentResult:
    """H^L(1,1) after one GD step on (x, y=1), |x| = 1, learning rate eta gamma0^2 N.

    Rows per L: the seed mean, its standard error, the response-corrected
    prediction 1 + eta^2 gamma0^2 sum_k k^2 and the response-free 1 + eta^2 gamma0^2 L.
    """
    if N < 1 or not values:
        raise ContractError("need N >= 1 and at least one depth")
    rows = []
    for L in values:
        vals = np.array(_run_trials(_deep_linear_trial, [(N, int(L), eta, gamma0, s, D) for s in seeds]))
        for s, v in zip(seeds, vals):
            rows.append(Row("deep_linear_response", "L", int(L), int(s), 1, "H_L", float(v)))
        sem = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else math.nan
        summary = {"H_L_mean": float(vals.mean()), "H_L_sem": sem,
                   "dmft": dmft_prediction(int(L), eta, gamma0), "naive": naive_prediction(int(L), eta, gamma0)}
        for name, v in summary.items():
            rows.append(Row("deep_linear_response", "L", int(L), -1, 1, name, v))
    rows.sort(key=Row.key)
    return ExperimentResult("deep_linear_response", "L", rows, meta={"N": N, "eta": eta, "gamma0": gamma0})


def deep_linear_table(res: ExperimentResult) -> list[dict]:
    out: dict[int, dict] = {}
    for r in res.rows:
        if r.seed == -1:
            out.setdefault(r.value, {"L": r.value})[r.metric] = r.metric_value
    return [out[k] for k in sorted(out)]


def stability_probe(base: ModelConfig, values, alpha_A: float = 0.5, steps: int = 2, seeds=(0, 1),
                    optim: OptimizerConfig | None = None, data: DataSpec | None = None,
                    qk_init_scale: float = 1.0) -> ExperimentResult:
    """Backward-signal size after ``steps`` SGD steps, vs N; divergence is recorded.

    The fitted signal is g_kq, the part of g that flows back through W_K and
    W_Q. With alpha_A = 1/2 and the default qk_init_scale those weights have
    std N**(1/2).
    """
    _need_values(values)
    optim = replace(optim or OptimizerConfig(), steps=steps)
    cfg = base.with_(alpha_A=alpha_A, qk_init_scale=qk_init_scale)
    spec = SweepSpec("N", tuple(values), cfg, optim, tuple(seeds), "backward", tuple(sorted({0, steps})),
                     data or DataSpec(), name="stability")
    rows = run_sweep(spec)
    res = ExperimentResult("stability", "N", rows, meta={"alpha_A": alpha_A, "steps": steps})
    live = [r for r in rows if not r.diverged]
    if len({r.value for r in live}) >= 3:
        res.fits["g_kq"] = fit_rows(rows, "g_kq", steps)
        res.fits["g_change"] = fit_rows(rows, "g_change", steps)
    return res


def init_scales_experiment(base: ModelConfig, values, alpha_A: float, seeds=tuple(range(16)),
                           data: DataSpec | None = None) -> ExperimentResult:
    """Var over heads of the init pre-attention variables and RMS key entries, vs N."""
    _need_values(values)
    spec = SweepSpec("N", tuple(values), base.with_(alpha_A=alpha_A), OptimizerConfig(steps=0), tuple(seeds),
                     "attn", (0,), data or DataSpec(), name="init_scales")
    rows = [r for r in run_sweep(spec) if r.metric in ("var_A", "rms_k")]
    res = ExperimentResult("init_scales", "N", rows, meta={"alpha_A": alpha_A})
    res.fits["var_A"] = fit_rows(rows, "var_A", 0)
    res.fits["rms_k"] = fit_rows(rows, "rms_k", 0)
    return res


# ---------------------------------------------------------------- CSV


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def result_csv(res: ExperimentResult) -> str:
    """Rows in CSV_COLUMNS order, then one fit.<metric>.<field> row per FitResult field."""
    lines = [",".join(CSV_COLUMNS)]
    for r in res.rows:
        lines.append(",".join(_fmt(v) for v in (r.experiment, r.axis, r.value, r.seed, r.step, r.metric,
                                                 r.metric_value, r.diverged)))
    for metric in sorted(res.fits):
        f = res.fits[metric]
        for fld, v in (("exponent", f.exponent), ("log_intercept", f.log_intercept),
                       ("r_squared", f.r_squared), ("n_points", float(f.n_points))):
            lines.append(",".join([res.name, res.axis, "", "", "", f"fit.{metric}.{fld}", _fmt(v), ""]))
    return "\n".join(lines) + "\n"
