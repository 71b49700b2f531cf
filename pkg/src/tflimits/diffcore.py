"""Dense float64 tensors with a define-by-run reverse-mode tape.

Every op is a module-level function. An op records a node on the tape of its
first tracked input; ops on untracked tensors are plain numpy evaluations.

    tape = Tape()
    x = tape.param("x", np.array([3.0]))
    loss = sum_all(mul(x, x))
    grads = backward(tape, loss)      # {"x": array([6.])}
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


class Tensor:
    """An immutable float64 array, optionally tracked on a tape."""

    __slots__ = ("data", "tape", "uid", "grad")

    def __init__(self, data, tape: Tape | None = None, uid: int = -1):
        # A read-only view: the caller's array keeps its own flags.
        arr = np.asarray(data, dtype=np.float64).view()
        arr.setflags(write=False)
        self.data = arr
        self.tape = tape
        self.uid = uid
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, tracked={self.tracked})"


@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    out: Tensor


@dataclass
class Tape:
    """Ordered record of primitive ops; inputs always precede outputs."""

    nodes: list[_Node] = field(default_factory=list)
    leaves: dict[str, Tensor] = field(default_factory=dict)
    consumed: bool = False
    _count: int = 0

    def _next_uid(self) -> int:
        self._count += 1
        return self._count - 1

    def param(self, name: str, value) -> Tensor:
        if name in self.leaves:
            raise ContractError(f"duplicate parameter leaf {name!r}")
        t = Tensor(value, self, self._next_uid())
        self.leaves[name] = t
        return t

    def record(self, data: np.ndarray, inputs, vjp) -> Tensor:
        if self.consumed:
            raise ContractError("cannot record on a tape that was already swept")
        out = Tensor(data, self, self._next_uid())
        self.nodes.append(_Node(tuple(inputs), vjp, out))
        return out


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _tape_of(*xs: Tensor) -> Tape | None:
    for x in xs:
        if x.tape is not None:
            return x.tape
    return None


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(data)
    return tape.record(data, inputs, vjp)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = constant(a), constant(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from exc
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = constant(a), constant(b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = constant(a), constant(b)
    out = a.data * b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x) with the exact error function."""
    z = x.data
    cdf = 0.5 * (1.0 + erf(z / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    return _make(z * cdf, (x,), lambda g: (g * (cdf + z * pdf),))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


# ---------------------------------------------------------------- reductions


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    out = x.data.mean(axis=axis)

    def vjp(g):
        return (np.repeat(np.expand_dims(g, axis), n, axis=axis) / n,)

    return _make(out, (x,), vjp)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table by integer ids of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]

    def vjp(g):
        out = np.zeros(table.shape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ShapeError(f"take_rows: ids out of range [0, {n})")
    return _make(table.data[ids], (table,), vjp)


# ---------------------------------------------------------------- products


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch axes follow numpy matmul rules."""
    a, b = constant(a), constant(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), vjp)


def _contract(sx: str, x: np.ndarray, sy: str, y: np.ndarray, out: str) -> np.ndarray:
    """Two-operand einsum, via tensordot when no index is batched.

    The operand order is picked so the result lands in ``out`` order without
    a transpose when possible; np.einsum tends to return transposed views,
    which makes the weight updates walk memory with large strides.
    """
    shared = [c for c in sx if c in sy]
    if any(c in out for c in shared) or any(c not in out and c not in shared for c in sx + sy):
        return np.einsum(f"{sx},{sy}->{out}", x, y, optimize=True)
    best = None
    for (s1, a1), (s2, a2) in (((sx, x), (sy, y)), ((sy, y), (sx, x))):
        rest = [c for c in s1 if c not in shared] + [c for c in s2 if c not in shared]
        if best is None or rest == list(out):
            best = (s1, a1, s2, a2, rest)
    s1, a1, s2, a2, rest = best
    r = np.tensordot(a1, a2, axes=([s1.index(c) for c in shared], [s2.index(c) for c in shared]))
    if rest != list(out):
        r = r.transpose([rest.index(c) for c in out])
    return r


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum with an explicit output.

    Every index of an operand must appear in the output or in the other
    operand, so the adjoint is itself an einsum.
    """
    a, b = constant(a), constant(b)
    ins, out_sub = spec.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        if len(set(s)) != len(s) or any(c not in out_sub and c not in other for c in s):
            raise ContractError(f"einsum spec {spec!r} not supported")
    try:
        out = _contract(sa, a.data, sb, b.data, out_sub)
    except ValueError as exc:
        raise ShapeError(f"einsum {spec}: {a.shape}, {b.shape}") from exc

    def vjp(g):
        return _contract(out_sub, g, sb, b.data, sa), _contract(out_sub, g, sa, a.data, sb)

    return _make(out, (a, b), vjp)


# ---------------------------------------------------------------- nonlinear blocks


def causal_mask(s: int) -> np.ndarray:
    return np.tril(np.ones((s, s), dtype=bool))


def softmax_rows(a: Tensor, causal: bool = False) -> Tensor:
    """Softmax over the last axis, with an optional lower-triangular support."""
    z = a.data
    if causal:
        mask = causal_mask(z.shape[-1])
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (a,), vjp)


def layernorm_fixed(h: Tensor, eps: float = 1e-6) -> Tensor:
    """Centre and normalise over the last axis; no gain or bias."""
    x = h.data
    d = x.shape[-1]
    if d < 2:
        raise ShapeError("layernorm_fixed needs at least 2 features")
    xc = x - x.mean(axis=-1, keepdims=True)
    # An overflowed variance would give inv = 0 and a silently zeroed row;
    # propagate NaN so callers see the blow-up.
    with np.errstate(over="ignore", invalid="ignore"):
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = np.where(np.isfinite(var), 1.0 / np.sqrt(var + eps), np.nan)
    y = xc * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _make(y, (h,), vjp)


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (a,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def pick(x: Tensor, ids: np.ndarray) -> Tensor:
    """x[..., ids] along the last axis, one id per leading position."""
    ids = np.asarray(ids, dtype=np.int64)
    lead = x.shape[:-1]
    if ids.shape != lead:
        raise ShapeError(f"pick: ids {ids.shape} vs leading shape {lead}")
    idx = np.indices(lead)
    out = x.data[(*idx, ids)]

    def vjp(g):
        full = np.zeros(x.shape)
        full[(*idx, ids)] = g
        return (full,)

    return _make(out, (x,), vjp)


# ---------------------------------------------------------------- backward


def backward(tape: Tape, loss: Tensor, retain: bool = False) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar; sets ``.grad`` on every tracked tensor.

    Returns the gradient of every named parameter leaf (zeros if unused).
    Unless ``retain``, the recorded graph and leaf table are dropped
    afterwards: tensors point at their tape, so keeping them would hold
    every intermediate array in a reference cycle.
    """
    if tape.consumed:
        raise ContractError("tape was already swept; pass retain=True to sweep twice")
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is not tape:
        raise ContractError("loss is not recorded on this tape")
    grads: dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.get(node.out.uid)
        if g is None:
            continue
        node.out.grad = g
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if inp.tape is not tape or gi is None:
                continue
            prev = grads.get(inp.uid)
            grads[inp.uid] = gi if prev is None else prev + gi
    out = {}
    for name, leaf in tape.leaves.items():
        g = grads.get(leaf.uid)
        leaf.grad = np.zeros(leaf.shape) if g is None else g
        out[name] = leaf.grad
    if not retain:
        tape.nodes.clear()
        tape.leaves.clear()
        tape.consumed = True
    return out


def finite_diff_check(
    f: Callable[[Tape, dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    step: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` builds a scalar on the given tape from the leaves it is handed.
    The error per coordinate is |analytic - numeric| / (|numeric| + 1e-12).
    """
    if step <= 0:
        raise ContractError("step must be positive")
    tape = Tape()
    leaves = {k: tape.param(k, v) for k, v in params.items()}
    analytic = backward(tape, f(tape, leaves))

    def value(p):
        t = Tape()
        return f(t, {k: t.param(k, v) for k, v in p.items()}).item()

    worst = 0.0
    for name, base in params.items():
        base = np.asarray(base, dtype=np.float64)
        flat = base.reshape(-1)
        for i in range(flat.size):
            plus, minus = flat.copy(), flat.copy()
            plus[i] += step
            minus[i] -= step
            fp = value({**params, name: plus.reshape(base.shape)})
            fm = value({**params, name: minus.reshape(base.shape)})
            numeric = (fp - fm) / (2.0 * step)
            err = abs(analytic[name].reshape(-1)[i] - numeric) / (abs(numeric) + 1e-12)
            worst = max(worst, err)
    return worst
