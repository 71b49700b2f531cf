"""Measurement instruments over activation traces.

Kernels carry an explicit index set of (sample, position, time) triples;
position -1 marks a position-pooled row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import ContractError
from .model import ActivationTrace, Params

POOLED = -1


@dataclass(frozen=True)
class Kernel:
    layer: int
    index: tuple[tuple[int, int, int], ...]
    values: np.ndarray

    def __post_init__(self):
        m = len(self.index)
        if self.values.shape != (m, m):
            raise ContractError(f"kernel values {self.values.shape} vs {m} index triples")

    @property
    def size(self) -> int:
        return len(self.index)

    def dumps(self) -> str:
        lines = [
            "# tflimits kernel v1",
            f"layer {self.layer}",
            f"size {self.size}",
            "index " + " ".join(f"{a},{b},{c}" for a, b, c in self.index),
        ]
        for row in self.values:
            lines.append(" ".join(format(float(x), ".17g") for x in row))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> Kernel:
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("# tflimits kernel"):
            raise ValueError("not a kernel dump")
        layer = int(lines[1].split()[1])
        size = int(lines[2].split()[1])
        index = tuple(tuple(int(v) for v in tok.split(",")) for tok in lines[3].split()[1:])
        rows = [[float(v) for v in ln.split()] for ln in lines[4 : 4 + size]]
        return cls(layer, index, np.array(rows, dtype=np.float64).reshape(size, size))


def _layer_index(trace: ActivationTrace, layer: int) -> int:
    n = len(trace.h)
    if not 1 <= layer <= n:
        raise ContractError(f"layer must be in [1, {n}], got {layer}")
    return layer - 1


def _gram(rows: np.ndarray, norm: float) -> np.ndarray:
    g = rows @ rows.T / norm
    return 0.5 * (g + g.T)


def _stream_rows(fields: np.ndarray, pooled: bool, step: int):
    B, S, _ = fields.shape
    if pooled:
        return fields.mean(axis=1), tuple((b, POOLED, step) for b in range(B))
    return fields.reshape(B * S, -1), tuple((b, s, step) for b in range(B) for s in range(S))


def residual_kernel(trace: ActivationTrace, layer: int, pooled: bool = False) -> Kernel:
    """H = h . h' / (N H) over all samples (and positions unless pooled)."""
    h = trace.h[_layer_index(trace, layer)]
    rows, index = _stream_rows(h, pooled, trace.step)
    return Kernel(layer, index, _gram(rows, trace.config.width))


def gradient_kernel(trace: ActivationTrace, layer: int, pooled: bool = False) -> Kernel:
    """G = g . g' / (N H) with g = gamma0 N H df/dh (see model.output_backward)."""
    if trace.g is None:
        raise ContractError("trace has no backward pass; use model.output_backward")
    g = trace.g[_layer_index(trace, layer)]
    rows, index = _stream_rows(g, pooled, trace.step)
    return Kernel(layer, index, _gram(rows, trace.config.width))


@dataclass(frozen=True)
class HeadStats:
    layer: int
    head: int
    A: np.ndarray  # (B, S, S)
    V: np.ndarray  # (B*S, B*S), rows ordered (sample, position)
    Q: np.ndarray
    K: np.ndarray


def _block(trace: ActivationTrace, layer: int) -> int:
    L = len(trace.A)
    if not 1 <= layer <= L:
        raise ContractError(f"attention layer must be in [1, {L}], got {layer}")
    return layer - 1


def head_kernels(trace: ActivationTrace, layer: int, head: int) -> HeadStats:
    """Per-head 1/N Gram matrices of values, queries and keys, plus raw A."""
    i = _block(trace, layer)
    H, N = trace.config.H, trace.config.N
    if not 0 <= head < H:
        raise ContractError(f"head must be in [0, {H})")

    def gram(x):
        rows = x[:, head].reshape(-1, N)
        return _gram(rows, N)

    return HeadStats(layer, head, trace.A[i][:, head].copy(), gram(trace.v[i]), gram(trace.q[i]), gram(trace.k[i]))


def head_avg_value_kernel(trace: ActivationTrace, layer: int) -> Kernel:
    """V^sigma = sum_h vsig_h . vsig_h' / (N H) over (sample, position) pairs."""
    i = _block(trace, layer)
    vs = trace.vsig[i]  # (B, H, S, N)
    B, H, S, N = vs.shape
    rows = np.transpose(vs, (0, 2, 1, 3)).reshape(B * S, H * N)
    index = tuple((b, s, trace.step) for b in range(B) for s in range(S))
    return Kernel(layer, index, _gram(rows, N * H))


def attn_head_variance(trace: ActivationTrace, layer: int, s: int | None = None, s2: int | None = None,
                       sample: int | None = None) -> float:
    """Unbiased variance over heads of A[layer, h][s, s2] for one sample.

    With any of ``s``, ``s2`` or ``sample`` left as None the variance is
    averaged over that index (causal traces: only s2 <= s).
    """
    i = _block(trace, layer)
    A = trace.A[i]  # (B, H, S, S)
    if A.shape[1] < 2:
        raise ContractError("head variance needs at least 2 heads")
    var = A.var(axis=1, ddof=1)  # (B, S, S)
    if trace.config.mode == "causal_lm":
        var = np.where(np.tril(np.ones(var.shape[-2:], dtype=bool)), var, np.nan)
    sel = var[
        slice(None) if sample is None else sample,
        slice(None) if s is None else s,
        slice(None) if s2 is None else s2,
    ]
    return float(np.nanmean(sel))


def attn_histogram(trace: ActivationTrace, layer: int, s: int, s2: int, sample: int, bins: int = 16,
                   value_range: tuple[float, float] | None = None):
    """Normalised histogram (sums to 1) of A over heads; returns (weights, edges)."""
    i = _block(trace, layer)
    vals = trace.A[i][sample, :, s, s2]
    if len(vals) < bins:
        raise ContractError("need at least as many heads as bins")
    if value_range is None:
        lo, hi = float(vals.min()), float(vals.max())
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
        value_range = (lo, hi)
    counts, edges = np.histogram(vals, bins=bins, range=value_range)
    return counts / counts.sum(), edges


def excess_kurtosis(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64) - np.mean(x)
    return float(np.mean(x**4) / np.mean(x**2) ** 2 - 3.0)


def _rms(x) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def update_meters(before: Params, after: Params, trace_before: ActivationTrace | None = None,
                  trace_after: ActivationTrace | None = None) -> dict[str, float]:
    """Update sizes between two parameter sets (and their traces on one batch).

    Weight meters are Frobenius norms over all heads, averaged over layers.
    Activation meters are RMS over entries, all layers pooled; the residual
    one uses the final stream h^{L+1}. Causal traces only count A entries
    on the causal support.
    """
    out: dict[str, float] = {}
    for w in ("W_K", "W_Q"):
        names = [n for n in before.names() if n.endswith("." + w)]
        norms = [float(np.linalg.norm(after[n] - before[n])) for n in names]
        out[f"fro_d{w}"] = float(np.mean(norms)) if norms else 0.0
    if trace_before is not None and trace_after is not None:
        out["rms_dk"] = _rms(np.concatenate([(a - b).ravel() for a, b in zip(trace_after.k, trace_before.k)]))
        dA = [a - b for a, b in zip(trace_after.A, trace_before.A)]
        if trace_before.config.mode == "causal_lm":
            m = np.tril(np.ones(dA[0].shape[-2:], dtype=bool))
            dA = [d[..., m] for d in dA]
        out["rms_dA"] = _rms(np.concatenate([d.ravel() for d in dA]))
        out["rms_dhL"] = _rms(trace_after.h[-1] - trace_before.h[-1])
    if trace_before is not None:
        out.update(weight_driven_meters(before, after, trace_before))
    return out


def weight_driven_meters(before: Params, after: Params, trace: ActivationTrace) -> dict[str, float]:
    """Key and pre-attention changes caused by dW_K, dW_Q alone.

    The residual stream is held at its value in ``trace``, so movement of
    earlier layers (which rotates k through a frozen W_K) is not counted.
    """
    cfg = trace.config
    dks, dAs = [], []
    for i in range(len(trace.A)):
        hb = trace.hbar[i]
        dk = np.einsum("bsw,hnw->bhsn", hb, after[f"block{i}.W_K"] - before[f"block{i}.W_K"]) * cfg.qk_scale
        dq = np.einsum("bsw,hnw->bhsn", hb, after[f"block{i}.W_Q"] - before[f"block{i}.W_Q"]) * cfg.qk_scale
        k, q = trace.k[i], trace.q[i]
        dA = (np.einsum("bhsn,bhtn->bhst", k + dk, q + dq) - np.einsum("bhsn,bhtn->bhst", k, q)) / cfg.N**cfg.alpha_A
        if cfg.mode == "causal_lm":
            dA = dA[..., np.tril(np.ones(dA.shape[-2:], dtype=bool))]
        dks.append(dk.ravel())
        dAs.append(dA.ravel())
    return {"rms_dk_w": _rms(np.concatenate(dks)), "rms_dA_w": _rms(np.concatenate(dAs))}


def kernel_distance(a: Kernel, b: Kernel) -> float:
    """Mean squared entrywise difference."""
    if a.index != b.index:
        raise ContractError("kernels are indexed over different (sample, position, time) sets")
    return float(np.mean((a.values - b.values) ** 2))
