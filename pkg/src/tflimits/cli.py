"""Command line front end: train, sweep, probe and report.

    tflimits {train|sweep|probe|report} --config PATH [--set key=value]... [--out DIR]

Configs are flat ``key = value`` files, one key per line, ``#`` comments.
Every key is checked against RunConfig; an unknown key exits with code 2.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import struct
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import model as m
from . import probes as pr
from . import scalinglab as sl
from .diffcore import ContractError
from .optim import OptimizerConfig, train
from .tasks import DataSpec

log = logging.getLogger("tflimits")

EXPERIMENTS = ("head_collapse", "kernel_convergence", "logit_convergence", "depth", "update_scaling",
               "deep_linear_response", "stability", "init_scales")


class ConfigError(ValueError):
    pass


def _ints(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    if ".." in text and "," not in text:
        lo, hi = text.split("..")
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(v) for v in text.split(","))


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class RunConfig:
    # model
    N: int = 8
    H: int = 4
    L: int = 2
    S: int = 4
    D: int = 8
    alpha_A: float = 1.0
    alpha_L: float = 1.0
    beta0: float = 1.0
    gamma0: float = 1.0
    eps_ln: float = 1e-6
    adam_scale: int = 0
    qk_init_scale: float = 1.0
    # optimiser
    optimizer: str = "sgd"
    eta0: float = 0.05
    momentum: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 10
    lr_includes_gamma0: bool = False
    # data
    task: str = "regression"
    n_samples: int = 16
    teacher_scale: float = 1.0
    n_classes: int = 2
    vocab: int = 8
    batch_size: int = 0
    data_seed: int = 0
    # probes
    kernel_layers: tuple[int, ...] = ()
    kernel_pooled: bool = True
    gradient_kernels: bool = False
    hist_bins: int = 8
    # sweeps
    experiment: str = ""
    values: tuple[int, ...] = ()
    seeds: tuple[int, ...] = (0, 1)
    ref_seeds: tuple[int, ...] = tuple(range(100, 108))
    layer: int = 0
    steps_early: int = -1  # -1: 10% of the step budget
    eta: float = 0.1
    # run
    seed: int = 0
    out_dir: str = "out"

    def model_config(self) -> m.ModelConfig:
        cfg = m.ModelConfig(N=self.N, H=self.H, L=self.L, S=self.S, D=self.D, alpha_A=self.alpha_A,
                            alpha_L=self.alpha_L, beta0=self.beta0, gamma0=self.gamma0, eps_ln=self.eps_ln,
                            adam_scale=self.adam_scale, qk_init_scale=self.qk_init_scale)
        return self.data_spec().shape_config(cfg)

    def optim_config(self) -> OptimizerConfig:
        return OptimizerConfig(kind=self.optimizer, eta0=self.eta0, momentum=self.momentum,
                               adam_beta1=self.adam_beta1, adam_beta2=self.adam_beta2, adam_eps=self.adam_eps,
                               steps=self.steps, lr_includes_gamma0=self.lr_includes_gamma0)

    def data_spec(self) -> DataSpec:
        return DataSpec(self.task, self.n_samples, self.teacher_scale, self.n_classes, self.vocab,
                        self.batch_size, self.data_seed)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _parse_value(name: str, text: str):
    default = _FIELDS[name].default
    try:
        if isinstance(default, bool):
            return _bool(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return _ints(text)
        return text.strip()
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {text!r} ({exc})") from None


def _emit_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def parse_pairs(pairs: list[tuple[int, str, str]], base: RunConfig | None = None) -> RunConfig:
    kw = {}
    for lineno, key, text in pairs:
        if key not in _FIELDS:
            where = f" (line {lineno})" if lineno else ""
            raise ConfigError(f"unknown config key {key!r}{where}")
        kw[key] = _parse_value(key, text)
    cfg = dataclasses.replace(base or RunConfig(), **kw)
    try:
        cfg.model_config()
        cfg.optim_config()
    except ContractError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def _split_lines(text: str) -> list[tuple[int, str, str]]:
    out = []
    for i, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {i}: expected key = value, got {raw!r}")
        k, v = line.split("=", 1)
        out.append((i, k.strip(), v.strip()))
    return out


def parse_config(text: str, overrides: list[str] = ()) -> RunConfig:
    pairs = _split_lines(text)
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"--set expects key=value, got {ov!r}")
        k, v = ov.split("=", 1)
        pairs.append((0, k.strip(), v.strip()))
    return parse_pairs(pairs)


def emit_config(cfg: RunConfig) -> str:
    return "".join(f"{f} = {_emit_value(getattr(cfg, f))}\n" for f in _FIELDS)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"TFLCKPT\x00"
VERSION = 1


def save_checkpoint(path, params: m.Params, cfg: RunConfig):
    echo = emit_config(cfg).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(echo)), echo, struct.pack("<I", len(params.names()))]
    for name in sorted(params.names()):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        key = name.encode()
        parts.append(struct.pack("<H", len(key)) + key + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[m.Params, str]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ValueError("not a tflimits checkpoint")
    version, n_echo = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 16
    echo = buf[pos : pos + n_echo].decode()
    pos += n_echo
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + klen].decode()
        pos += klen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) * 8
        tensors[name] = np.frombuffer(buf[pos : pos + n], dtype="<f8").reshape(shape).astype(np.float64)
        pos += n
    return m.Params(tensors), echo


# ---------------------------------------------------------------- outputs


def _g(v: float) -> str:
    return format(float(v), ".17g")


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _dump_probes(out: Path, params: m.Params, cfg: RunConfig, tag: str):
    config = cfg.model_config()
    x = cfg.data_spec().build(config.S, config.D).inputs
    trace = m.output_backward(params, config, x) if cfg.gradient_kernels else m.forward(params, config, x)[1]
    pooled = cfg.kernel_pooled and config.mode == "pooled_classifier"
    for layer in cfg.kernel_layers:
        _write(out / f"{tag}_H{layer}.txt", pr.residual_kernel(trace, layer, pooled).dumps())
        if cfg.gradient_kernels:
            _write(out / f"{tag}_G{layer}.txt", pr.gradient_kernel(trace, layer, pooled).dumps())
    return trace


def cmd_train(cfg: RunConfig, out: Path) -> int:
    config, opt = cfg.model_config(), cfg.optim_config()
    ds = cfg.data_spec().build(config.S, config.D)
    params, tlog = train(m.init_params(config, cfg.seed), config, opt, ds)
    lines = ["step,loss,diverged"]
    lines += [f"{i},{_g(v)},0" for i, v in enumerate(tlog.losses)]
    if tlog.diverged:
        lines.append(f"{tlog.diverged_at},nan,1")
    _write(out / "loss.csv", "\n".join(lines) + "\n")
    _write(out / "config.txt", emit_config(cfg))
    save_checkpoint(out / "model.ckpt", params, cfg)
    _dump_probes(out, params, cfg, "kernel")
    log.info("trained %d steps, final loss %s", len(tlog.losses), tlog.losses[-1] if tlog.losses else "n/a")
    return 0


def run_experiment(cfg: RunConfig) -> sl.ExperimentResult:
    name = cfg.experiment
    base = cfg.model_config()
    opt = cfg.optim_config()
    data = cfg.data_spec()
    seeds = cfg.seeds
    if not seeds:
        raise ContractError("seeds list is empty")
    vals = cfg.values
    if name == "head_collapse":
        res = sl.head_collapse_experiment(base, vals, cfg.alpha_A, cfg.steps, seeds, opt, data, cfg.layer or None)
    elif name == "kernel_convergence":
        res = sl.kernel_convergence_experiment(base, vals, cfg.layer or None, seeds, cfg.ref_seeds, data)
    elif name == "logit_convergence":
        early = cfg.steps_early if cfg.steps_early >= 0 else max(1, round(0.1 * cfg.steps))
        res = sl.logit_convergence_experiment(base, vals, early, seeds, cfg.ref_seeds, opt, data)
    elif name == "depth":
        res = sl.depth_experiment(base, vals, cfg.alpha_L, cfg.steps, seeds, opt, data)
    elif name == "update_scaling":
        res = sl.update_scaling_experiment(base, vals, cfg.alpha_A, cfg.steps, seeds, opt, data)
    elif name == "deep_linear_response":
        res = sl.deep_linear_response_check(cfg.N, vals, cfg.eta, cfg.gamma0, seeds, cfg.D)
    elif name == "stability":
        res = sl.stability_probe(base, vals, cfg.alpha_A, cfg.steps, seeds, opt, data, cfg.qk_init_scale)
    elif name == "init_scales":
        res = sl.init_scales_experiment(base, vals, cfg.alpha_A, seeds, data)
    else:
        raise ConfigError(f"unknown experiment {name!r}; valid: {', '.join(EXPERIMENTS)}")
    return res


def cmd_sweep(cfg: RunConfig, out: Path) -> int:
    if cfg.experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {cfg.experiment!r}; valid: {', '.join(EXPERIMENTS)}")
    res = run_experiment(cfg)
    meta = dict(res.meta)
    text = sl.result_csv(res)
    text += "".join(f"{res.name},{res.axis},,,,meta.{k},{_g(v)},\n" for k, v in sorted(meta.items())
                    if isinstance(v, (int, float)))
    _write(out / f"{res.name}.csv", text)
    for metric, fit in sorted(res.fits.items()):
        log.info("%s %s exponent %.3f (r2 %.3f, %d points)", res.name, metric, fit.exponent, fit.r_squared,
                 fit.n_points)
    if res.n_diverged:
        log.info("%d trials diverged and were excluded from fits", res.n_diverged)
    return 0


def cmd_probe(cfg: RunConfig, ckpt: Path, out: Path) -> int:
    if not ckpt.exists():
        raise FileNotFoundError(f"missing checkpoint {ckpt}")
    params, _ = load_checkpoint(ckpt)
    config = cfg.model_config()
    want = m.init_params(config, 0)
    if sorted(want.names()) != sorted(params.names()):
        raise ConfigError("checkpoint tensors do not match the config")
    for name in want.names():
        if want[name].shape != params[name].shape:
            raise ConfigError(f"shape mismatch for {name}: checkpoint {params[name].shape}, "
                              f"config {want[name].shape}")
    trace = _dump_probes(out, params, cfg, "probe")
    if config.H >= cfg.hist_bins:
        for layer in range(1, config.L + 1):
            w, edges = pr.attn_histogram(trace, layer, config.S - 1, 0, 0, cfg.hist_bins)
            rows = ["bin_lo,bin_hi,weight"] + [f"{_g(a)},{_g(b)},{_g(c)}" for a, b, c in zip(edges, edges[1:], w)]
            _write(out / f"hist_L{layer}.csv", "\n".join(rows) + "\n")
    else:
        log.info("H=%d < hist_bins=%d; skipping head histograms", config.H, cfg.hist_bins)
    return 0


# ---------------------------------------------------------------- report

# (experiment, metric, meta key, meta value) -> (low, high) accepted exponent range.
TOLERANCES = {
    ("init_scales", "var_A", "alpha_A", 1.0): (-1.3, -0.7),
    ("init_scales", "var_A", "alpha_A", 0.5): (-0.2, 0.2),
    ("init_scales", "rms_k", None, None): (-0.15, 0.15),
    ("head_collapse", "head_var", "alpha_A", 1.0): (-2.5, -1.5),
    ("head_collapse", "head_var", "alpha_A", 0.5): (-0.3, 0.3),
    ("kernel_convergence", "kernel_dist", None, None): (-1.3, -0.7),
    ("logit_convergence", "logit_mse", None, None): (-1.4, -0.6),
    ("depth", "fro_dW_K", "alpha_L", 0.5): (-0.7, -0.3),
    ("depth", "fro_dW_K", "alpha_L", 1.0): (-0.2, 0.2),
    ("depth", "kernel_dev", "alpha_L", 1.0): (-2.5, -1.5),
    ("depth", "kernel_dev", "alpha_L", 0.5): (-0.3, 0.3),
    ("update_scaling", "rms_dk_w", "alpha_A", 1.0): (-0.2, 0.2),
    ("update_scaling", "rms_dk_w", "alpha_A", 0.5): (-0.7, -0.3),
    ("update_scaling", "rms_dA_w", None, None): (-0.25, 0.25),
    ("stability", "g_kq", "alpha_A", 0.5): (0.25, math.inf),
    ("stability", "g_kq", "alpha_A", 1.0): (-0.2, 0.2),
}


def expected_range(experiment: str, metric: str, meta: dict):
    for (e, mt, key, val), rng in TOLERANCES.items():
        if e == experiment and mt == metric and (key is None or meta.get(key) == val):
            return rng
    return None


def read_sweep_csv(path: Path) -> tuple[list[sl.Row], dict]:
    rows, meta = [], {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != sl.CSV_COLUMNS:
            raise ValueError(f"{path}:1: expected header {','.join(sl.CSV_COLUMNS)}")
        for lineno, rec in enumerate(reader, 2):
            if len(rec) != len(sl.CSV_COLUMNS):
                raise ValueError(f"{path}:{lineno}: expected {len(sl.CSV_COLUMNS)} fields, got {len(rec)}")
            exp, axis, value, seed, step, metric, mval, div = rec
            try:
                if metric.startswith("meta."):
                    meta[metric[5:]] = float(mval)
                    continue
                if metric.startswith("fit."):
                    continue
                rows.append(sl.Row(exp, axis, int(value), int(seed), int(step), metric, float(mval), div == "1"))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return rows, meta


def _nice(v: float) -> str:
    return f"{v:.3g}"


def svg_loglog(series: dict[str, list[tuple[float, float]]], fits: dict[str, sl.FitResult], title: str,
               xlabel: str) -> str:
    """Log-log scatter per metric with its fitted line and slope label."""
    W, Hh, pad = 560, 400, 60
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    pts = [(x, y) for s in series.values() for x, y in s if x > 0 and y > 0]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{Hh}" font-family="sans-serif" '
           f'font-size="12">', f'<rect width="{W}" height="{Hh}" fill="white"/>',
           f'<text x="{W / 2}" y="20" text-anchor="middle">{title}</text>']
    if not pts:
        out.append(f'<text x="{W / 2}" y="{Hh / 2}" text-anchor="middle">no positive data</text></svg>')
        return "\n".join(out) + "\n"
    lx = np.log10([p[0] for p in pts])
    ly = np.log10([p[1] for p in pts])
    x0, x1 = math.floor(lx.min() * 2) / 2, math.ceil(lx.max() * 2) / 2
    y0, y1 = math.floor(ly.min()), math.ceil(ly.max())
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1

    def px(v):
        return pad + (math.log10(v) - x0) / (x1 - x0) * (W - 2 * pad)

    def py(v):
        return Hh - pad - (math.log10(v) - y0) / (y1 - y0) * (Hh - 2 * pad)

    out.append(f'<rect x="{pad}" y="{pad}" width="{W - 2 * pad}" height="{Hh - 2 * pad}" fill="none" '
               f'stroke="black"/>')
    for e in range(int(y0), int(y1) + 1):
        y = py(10.0**e)
        out.append(f'<text x="{pad - 6}" y="{y + 4:.1f}" text-anchor="end">1e{e}</text>')
    for x in sorted({p[0] for p in pts}):
        out.append(f'<text x="{px(x):.1f}" y="{Hh - pad + 16}" text-anchor="middle">{x:g}</text>')
    out.append(f'<text x="{W / 2}" y="{Hh - 12}" text-anchor="middle">{xlabel}</text>')
    for i, (name, s) in enumerate(sorted(series.items())):
        col = colors[i % len(colors)]
        for x, y in s:
            if x > 0 and y > 0:
                out.append(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="3" fill="{col}"/>')
        label = name
        fit = fits.get(name)
        if fit is not None:
            xs = sorted({x for x, _ in s})
            a, b = xs[0], xs[-1]
            ya, yb = fit.predict([a, b])
            out.append(f'<polyline points="{px(a):.1f},{py(ya):.1f} {px(b):.1f},{py(yb):.1f}" '
                       f'stroke="{col}" fill="none"/>')
            label += f"  slope {fit.exponent:.2f}"
        out.append(f'<text x="{pad + 8}" y="{pad + 16 + 16 * i}" fill="{col}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_report(paths: list[Path], out: Path) -> int:
    md = ["# Sweep report", "", "| experiment | condition | metric | exponent | r2 | expected | status |",
          "|---|---|---|---|---|---|---|"]
    notes = []
    for path in paths:
        rows, meta = read_sweep_csv(path)
        if not rows:
            notes.append(f"{path.name}: no data rows")
            continue
        exp, axis = rows[0].experiment, rows[0].axis
        cond = ", ".join(f"{k}={v:g}" for k, v in sorted(meta.items()))
        if exp == "deep_linear_response":
            md_dl = _deep_linear_section(rows)
            notes.extend(md_dl)
            continue
        live = [r for r in rows if not r.diverged and math.isfinite(r.metric_value)]
        series, fits = {}, {}
        for metric in sorted({r.metric for r in live} - {"loss"}):
            mrows = [r for r in live if r.metric == metric]
            last = max(r.step for r in mrows)
            by_x: dict[int, list[float]] = {}
            for r in mrows:
                if r.step == last:
                    by_x.setdefault(r.value, []).append(r.metric_value)
            series[metric] = [(float(x), float(np.mean(v))) for x, v in sorted(by_x.items())]
            rng = expected_range(exp, metric, meta)
            if len(by_x) < 3:
                notes.append(f"{exp} {metric}: {len(by_x)} size(s); plotted without a fit")
                continue
            try:
                fit = sl.fit_rows(mrows, metric, last)
            except ContractError as exc:
                notes.append(f"{exp} {metric}: no fit ({exc})")
                continue
            fits[metric] = fit
            if rng is None:
                exp_txt, status = "n/a", "info"
            else:
                lo, hi = rng
                exp_txt = f">{lo:g}" if hi == math.inf else f"[{lo:g}, {hi:g}]"
                status = "pass" if lo <= fit.exponent <= hi else "FAIL"
            md.append(f"| {exp} | {cond} | {metric} | {fit.exponent:.2f} | {fit.r_squared:.3f} | {exp_txt} | "
                      f"{status} |")
        if exp == "head_collapse":
            notes.append(f"head_collapse: {meta.get('steps', 0):g} synthetic SGD steps; how this budget maps onto "
                         "the long real-data runs where collapse was reported is not known")
        n_div = len({(r.value, r.seed) for r in rows if r.diverged})
        if n_div:
            notes.append(f"{exp}: {n_div} diverged trial(s) excluded from fits")
        tag = "_".join([exp] + [f"{k}{v:g}" for k, v in sorted(meta.items()) if k.startswith("alpha")])
        _write(out / f"{tag}.svg", svg_loglog(series, fits, f"{exp} ({cond})", axis))
    if notes:
        md += ["", "## Notes", ""] + [f"- {n}" for n in notes]
    _write(out / "report.md", "\n".join(md) + "\n")
    return 0


def _deep_linear_section(rows: list[sl.Row]) -> list[str]:
    by_L: dict[int, dict] = {}
    for r in rows:
        if r.seed == -1:
            by_L.setdefault(r.value, {})[r.metric] = r.metric_value
    lines = []
    for L, d in sorted(by_L.items()):
        mean, sem, dmft, naive = d["H_L_mean"], d["H_L_sem"], d["dmft"], d["naive"]
        ok = abs(mean - dmft) <= 0.1 * dmft and abs(mean - naive) > 10 * sem
        lines.append(f"deep linear L={L}: H^L(1,1) = {mean:.4f} +- {sem:.4f}, response-corrected {dmft:.4f}, "
                     f"response-free {naive:.4f}: {'pass' if ok else 'FAIL'}")
    return lines


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tflimits")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("train", "sweep", "probe"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--out", type=Path)
        if name == "sweep":
            p.add_argument("--experiment")
        if name == "probe":
            p.add_argument("--checkpoint", required=True, type=Path)
    p = sub.add_parser("report")
    p.add_argument("csv", nargs="+", type=Path)
    p.add_argument("--out", type=Path, default=Path("report"))
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.csv, args.out)
        overrides = list(args.set)
        if getattr(args, "experiment", None):
            overrides.append(f"experiment={args.experiment}")
        cfg = parse_config(args.config.read_text(), overrides)
        out = args.out or Path(cfg.out_dir)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "sweep":
            return cmd_sweep(cfg, out)
        return cmd_probe(cfg, args.checkpoint, out)
    except (ConfigError, ContractError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
