"""Transformer with explicit width, head-count and depth scaling knobs.

Residual stream of width N*H, pre-layernorm MHSA and two-layer GELU MLP
branches multiplied by beta0 / L**alpha_L, key/query logits divided by
N**alpha_A, and a mean-field readout divided by gamma0 * N * H.

Layers of the residual stream are numbered 1..L+1: layer 1 is the read-in
(plus positional encoding), layer l+1 is the output of block l, and layer
L+1 is what the readout sees (after a final fixed layernorm).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .diffcore import ContractError, Tape, Tensor

MODES = ("pooled_classifier", "causal_lm", "deep_linear")
LOSS_KINDS = ("mse", "cross_entropy")


class NumericError(FloatingPointError):
    def __init__(self, layer: int, what: str = "activation"):
        super().__init__(f"non-finite {what} at layer {layer}")
        self.layer = layer


@dataclass(frozen=True)
class ModelConfig:
    N: int = 8
    H: int = 4
    L: int = 2
    S: int = 4
    D: int = 8
    O: int = 1
    alpha_A: float = 1.0
    alpha_L: float = 1.0
    beta0: float = 1.0
    gamma0: float = 1.0
    eps_ln: float = 1e-6
    mode: str = "pooled_classifier"
    adam_scale: int = 0
    # Multiplies the W_K / W_Q init std on top of N**(1 - alpha_A).
    qk_init_scale: float = 1.0

    def __post_init__(self):
        for name in ("N", "H", "L", "S", "D", "O"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ContractError(f"{name} must be a positive integer, got {v!r}")
        for name in ("alpha_A", "alpha_L"):
            v = getattr(self, name)
            if not 0.5 <= v <= 1.0:
                raise ContractError(f"{name} must lie in [0.5, 1], got {v}")
        if self.beta0 <= 0 or self.gamma0 <= 0 or self.eps_ln <= 0:
            raise ContractError("beta0, gamma0 and eps_ln must be positive")
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.adam_scale not in (0, 1):
            raise ContractError("adam_scale must be 0 or 1")
        if self.qk_init_scale <= 0:
            raise ContractError("qk_init_scale must be positive")

    @property
    def width(self) -> int:
        return self.N * self.H

    @property
    def branch_scale(self) -> float:
        return self.beta0 / self.L**self.alpha_L

    @property
    def qk_scale(self) -> float:
        return 1.0 / (self.N ** (1.5 - self.alpha_A) * math.sqrt(self.H))

    def with_(self, **kw) -> ModelConfig:
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


def edge_multiplier(config: ModelConfig) -> float:
    """Forward multiplier of the read-in, positional and readout weights.

    Init std of those weights is the reciprocal. At alpha_L = 1 this is the
    reference rule (L/beta0)**(-1/2) for SGD and (N*H)**(1/2) for Adam; for
    other alpha_L the depth factor follows the first/last-layer row of the
    learning-rate table, L**(1/2 - alpha_L) for SGD and L**(1 - alpha_L)
    for Adam.
    """
    L, a = config.L, config.adam_scale
    if a == 0:
        return (L ** (2 * config.alpha_L - 1) / config.beta0) ** -0.5
    return config.width**0.5 * L ** (1.0 - config.alpha_L)


@dataclass
class Params:
    """Named float64 weight arrays; block weights stacked over heads."""

    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self) -> Params:
        return Params({k: v.copy() for k, v in self.tensors.items()})

    def replace(self, **arrays) -> Params:
        out = self.copy()
        for k, v in arrays.items():
            if k not in out.tensors:
                raise KeyError(k)
            out.tensors[k] = np.asarray(v, dtype=np.float64)
        return out

    def equal(self, other: Params) -> bool:
        return sorted(self.names()) == sorted(other.names()) and all(
            np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors
        )


def param_group(name: str) -> str:
    if name == "W0":
        return "read_in"
    if name == "pos":
        return "positional"
    if name == "wL":
        return "read_out"
    return "bulk"


def block_names(layer: int) -> list[str]:
    return [f"block{layer}.{w}" for w in ("W_K", "W_Q", "W_V", "W_O", "W1", "W2")]


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), stream]))


def init_params(config: ModelConfig, seed: int, block_seed: int | None = None) -> Params:
    """Gaussian init; each tensor draws from its own stream of ``seed``.

    ``block_seed`` (default ``seed``) seeds the residual-block weights alone,
    so two models can share read-in/positional/readout weights exactly.
    """
    if config.mode == "deep_linear":
        return init_deep_linear(config, seed)
    N, H, W = config.N, config.H, config.width
    c = edge_multiplier(config)
    bseed = seed if block_seed is None else block_seed
    t: dict[str, np.ndarray] = {}
    t["W0"] = _rng(seed, 0).standard_normal((W, config.D)) / c
    t["pos"] = _rng(seed, 1).standard_normal((config.S, W)) / c
    qk_std = N ** (1.0 - config.alpha_A) * config.qk_init_scale
    for layer in range(config.L):
        base = 16 + 8 * layer
        k, q, v, o, w1, w2 = block_names(layer)
        t[k] = qk_std * _rng(bseed, base).standard_normal((H, N, W))
        t[q] = qk_std * _rng(bseed, base + 1).standard_normal((H, N, W))
        t[v] = _rng(bseed, base + 2).standard_normal((H, N, W))
        t[o] = _rng(bseed, base + 3).standard_normal((H, W, N))
        t[w1] = _rng(bseed, base + 4).standard_normal((W, W))
        t[w2] = _rng(bseed, base + 5).standard_normal((W, W))
    t["wL"] = _rng(seed, 2).standard_normal((W, config.O)) / c
    return Params(t)


@dataclass
class ActivationTrace:
    """Every intermediate field of one forward pass (numpy views of the tape).

    Shapes: h, htilde, hbar, htbar, mlp_hidden: (B, S, N*H); k, q, v, vsig:
    (B, H, S, N); A, sigma: (B, H, S, S). ``h`` has L+1 entries, the rest L.
    ``g`` and ``g_kq`` are filled by :func:`output_backward`.
    """

    config: ModelConfig
    h: list[np.ndarray]
    hbar: list[np.ndarray]
    k: list[np.ndarray]
    q: list[np.ndarray]
    v: list[np.ndarray]
    A: list[np.ndarray]
    sigma: list[np.ndarray]
    vsig: list[np.ndarray]
    htilde: list[np.ndarray]
    htbar: list[np.ndarray]
    mlp_hidden: list[np.ndarray]
    logits: np.ndarray
    step: int = 0
    delta: np.ndarray | None = None
    g: list[np.ndarray] | None = None
    g_kq: list[np.ndarray] | None = None
    tape: Tape | None = field(default=None, repr=False)
    _h_nodes: list[Tensor] = field(default_factory=list, repr=False)
    _logit_node: Tensor | None = field(default=None, repr=False)
    _kq_nodes: list[tuple[Tensor, Tensor]] = field(default_factory=list, repr=False)

    @property
    def batch_size(self) -> int:
        return self.logits.shape[0]


def attention_logits(k: np.ndarray, q: np.ndarray, N: int, alpha_A: float) -> float:
    k, q = np.asarray(k, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if k.shape != q.shape:
        raise dc.ShapeError(f"key {k.shape} vs query {q.shape}")
    return float(k @ q) / N**alpha_A


def _check(x: Tensor, layer: int) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NumericError(layer)
    return x


def _embed(config: ModelConfig, leaves: dict[str, Tensor], batch: np.ndarray) -> Tensor:
    c = edge_multiplier(config)
    S = config.S
    if config.mode == "causal_lm":
        ids = np.asarray(batch)
        if ids.ndim != 2 or ids.shape[1] != S:
            raise dc.ShapeError(f"token batch must be (B, {S}), got {ids.shape}")
        # Token lookup: one-hot read-in without the 1/sqrt(D) factor.
        h = dc.scale(dc.take_rows(dc.transpose(leaves["W0"], (1, 0)), ids), c)
    else:
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim != 3 or x.shape[1:] != (S, config.D):
            raise dc.ShapeError(f"input batch must be (B, {S}, {config.D}), got {x.shape}")
        h = dc.scale(dc.einsum("bsd,wd->bsw", dc.constant(x), leaves["W0"]), c / math.sqrt(config.D))
    return dc.add(h, dc.scale(leaves["pos"], c))


def _forward_on_tape(config: ModelConfig, leaves: dict[str, Tensor], batch) -> tuple[Tensor, ActivationTrace]:
    if config.mode == "deep_linear":
        raise ContractError("use forward_deep_linear for deep_linear mode")
    N, H, W = config.N, config.H, config.width
    causal = config.mode == "causal_lm"
    branch = config.branch_scale
    eps = config.eps_ln
    inv_w = 1.0 / math.sqrt(W)

    rec = {k: [] for k in ("h", "hbar", "k", "q", "v", "A", "sigma", "vsig", "htilde", "htbar", "mlp_hidden")}
    nodes, kq = [], []
    h = _check(_embed(config, leaves, batch), 1)
    for layer in range(config.L):
        rec["h"].append(h.data)
        nodes.append(h)
        wk, wq, wv, wo, w1, w2 = (leaves[n] for n in block_names(layer))
        hbar = dc.layernorm_fixed(h, eps)
        k = dc.scale(dc.einsum("bsw,hnw->bhsn", hbar, wk), config.qk_scale)
        q = dc.scale(dc.einsum("bsw,hnw->bhsn", hbar, wq), config.qk_scale)
        v = dc.scale(dc.einsum("bsw,hnw->bhsn", hbar, wv), inv_w)
        A = dc.scale(dc.einsum("bhsn,bhtn->bhst", k, q), 1.0 / N**config.alpha_A)
        sig = dc.softmax_rows(A, causal=causal)
        vsig = dc.einsum("bhst,bhtn->bhsn", sig, v)
        mhsa = dc.scale(dc.einsum("bhsn,hwn->bsw", vsig, wo), inv_w)
        ht = _check(dc.add(h, dc.scale(mhsa, branch)), layer + 1)
        htbar = dc.layernorm_fixed(ht, eps)
        hid = dc.scale(dc.einsum("bsw,uw->bsu", htbar, w1), inv_w)
        mlp = dc.scale(dc.einsum("bsu,wu->bsw", dc.gelu(hid), w2), inv_w)
        h = _check(dc.add(ht, dc.scale(mlp, branch)), layer + 2)
        kq.append((k, q))
        for key, t in (("hbar", hbar), ("k", k), ("q", q), ("v", v), ("A", A), ("sigma", sig),
                       ("vsig", vsig), ("htilde", ht), ("htbar", htbar), ("mlp_hidden", hid)):
            rec[key].append(t.data)
    rec["h"].append(h.data)
    nodes.append(h)

    hf = dc.layernorm_fixed(h, eps)
    out_scale = edge_multiplier(config) / (config.gamma0 * W)
    if causal:
        logits = dc.scale(dc.einsum("bsw,wo->bso", hf, leaves["wL"]), out_scale)
    else:
        logits = dc.scale(dc.einsum("bw,wo->bo", dc.mean(hf, axis=1), leaves["wL"]), out_scale)
    _check(logits, config.L + 1)
    trace = ActivationTrace(config=config, logits=logits.data, tape=h.tape, _h_nodes=nodes,
                            _logit_node=logits, _kq_nodes=kq, **rec)
    return logits, trace


def forward(params: Params, config: ModelConfig, batch) -> tuple[np.ndarray, ActivationTrace]:
    """Logits (B, O) pooled or (B, S, O) causal, plus the full trace."""
    tape = Tape()
    leaves = {k: tape.param(k, v) for k, v in params.tensors.items()}
    logits, trace = _forward_on_tape(config, leaves, batch)
    return logits.data, trace


def loss_tensor(logits: Tensor, targets, loss_kind: str) -> Tensor:
    if loss_kind == "mse":
        y = np.asarray(targets, dtype=np.float64).reshape(logits.shape)
        r = dc.sub(logits, dc.constant(y))
        return dc.scale(dc.sum_all(dc.mul(r, r)), 0.5 / logits.shape[0])
    if loss_kind == "cross_entropy":
        ids = np.asarray(targets, dtype=np.int64)
        nll = dc.pick(dc.log_softmax(logits), ids)
        return dc.scale(dc.sum_all(nll), -1.0 / ids.size)
    raise ContractError(f"loss_kind must be one of {LOSS_KINDS}")


def loss_and_grads(params: Params, config: ModelConfig, batch, targets, loss_kind: str = "mse"):
    """Batch-mean loss (0.5 * squared error for mse), its exact gradients, and the trace."""
    tape = Tape()
    leaves = {k: tape.param(k, v) for k, v in params.tensors.items()}
    logits, trace = _forward_on_tape(config, leaves, batch)
    loss = loss_tensor(logits, targets, loss_kind)
    grads = dc.backward(tape, loss)
    # Error signal -dl/df per sample (undo the 1/B of the batch mean).
    trace.delta = -logits.grad * trace.batch_size
    return loss.item(), grads, trace


def output_backward(params: Params, config: ModelConfig, batch, output: int = 0) -> ActivationTrace:
    """Forward pass plus backward of f (summed over the batch) for one output.

    Fills ``trace.g[l] = gamma0 * N * H * df/dh^l`` and ``trace.g_kq``, the
    key/query share of the signal at the layernormed stream (same scale).
    Samples do not interact, so summing over the batch gives each sample's
    own gradient.
    """
    tape = Tape()
    leaves = {k: tape.param(k, v) for k, v in params.tensors.items()}
    logits, trace = _forward_on_tape(config, leaves, batch)
    sel = np.zeros(logits.shape)
    sel[..., output] = 1.0
    dc.backward(tape, dc.sum_all(dc.mul(logits, dc.constant(sel))))
    scale = config.gamma0 * config.width
    trace.g = [scale * (n.grad if n.grad is not None else np.zeros(n.shape)) for n in trace._h_nodes]
    # The part of the signal into the normalised stream that flows back
    # through the keys and queries.
    trace.g_kq = []
    for layer, (k, q) in enumerate(trace._kq_nodes):
        wk, wq = params[f"block{layer}.W_K"], params[f"block{layer}.W_Q"]
        back = np.einsum("bhsn,hnw->bsw", _grad(k), wk) + np.einsum("bhsn,hnw->bsw", _grad(q), wq)
        trace.g_kq.append(scale * config.qk_scale * back)
    return trace


def _grad(t: Tensor) -> np.ndarray:
    return t.grad if t.grad is not None else np.zeros(t.shape)


# ---------------------------------------------------------------- deep linear


def init_deep_linear(config: ModelConfig, seed: int) -> Params:
    """Standard-normal W0 (N x D), W1..W_{L-1} (N x N) and readout w (N)."""
    N = config.N
    t = {"W0": _rng(seed, 0).standard_normal((N, config.D))}
    for layer in range(1, config.L):
        t[f"W{layer}"] = _rng(seed, 16 + layer).standard_normal((N, N))
    t["wL"] = _rng(seed, 2).standard_normal(N)
    return Params(t)


def _deep_linear_on_tape(leaves: dict[str, Tensor], L: int, gamma0: float, x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    x = x / np.linalg.norm(x)
    N = leaves["W0"].shape[0]
    h = dc.matmul(leaves["W0"], dc.constant(x.reshape(-1, 1)))
    hs = [h]
    for layer in range(1, L):
        h = dc.scale(dc.matmul(leaves[f"W{layer}"], h), 1.0 / math.sqrt(N))
        hs.append(h)
    w = dc.reshape(leaves["wL"], (1, N))
    f = dc.scale(dc.matmul(w, h), 1.0 / (gamma0 * N))
    return f, hs


def forward_deep_linear(params: Params, L: int, gamma0: float, x) -> tuple[float, list[np.ndarray]]:
    """Non-residual linear net: h^1 = W0 x (x normalised), h^{l+1} = W^l h^l / sqrt(N).

    Returns f = w . h^L / (gamma0 N) and the L preactivation vectors.
    """
    if L < 1:
        raise ContractError("deep linear net needs L >= 1 hidden layers")
    leaves = {k: Tensor(v) for k, v in params.tensors.items()}
    f, hs = _deep_linear_on_tape(leaves, L, gamma0, x)
    return f.item(), [h.data.reshape(-1) for h in hs]


def deep_linear_loss_and_grads(params: Params, L: int, gamma0: float, x, y: float):
    tape = Tape()
    leaves = {k: tape.param(k, v) for k, v in params.tensors.items()}
    f, _ = _deep_linear_on_tape(leaves, L, gamma0, x)
    r = dc.sub(f, dc.constant(np.array([[y]])))
    loss = dc.scale(dc.sum_all(dc.mul(r, r)), 0.5)
    return loss.item(), dc.backward(tape, loss)
