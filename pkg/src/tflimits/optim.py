"""SGD / Adam with width- and depth-scaled learning rates.

Multiplier convention: read-in, positional and readout weights carry a
forward multiplier c and are initialised with std 1/c; every tensor is
updated with the same plain learning rate. Because c scales both the
forward pass and the gradient, the effective weight c*theta moves by
lr * c**2 * dL/d(c*theta) per SGD step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .diffcore import ContractError
from .model import (
    ModelConfig,
    NumericError,
    Params,
    edge_multiplier,
    loss_and_grads,
    param_group,
)

log = logging.getLogger(__name__)

GROUPS = ("read_in", "positional", "bulk", "read_out")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"
    eta0: float = 0.05
    momentum: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 10
    lr_includes_gamma0: bool = False

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ContractError(f"optimizer kind must be sgd or adam, got {self.kind!r}")
        if self.eta0 < 0:
            raise ContractError("eta0 must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError("momentum must lie in [0, 1)")
        for b in (self.adam_beta1, self.adam_beta2):
            if not 0.0 <= b < 1.0:
                raise ContractError("adam betas must lie in [0, 1)")
        if self.steps < 0:
            raise ContractError("steps must be nonnegative")


def scaled_lr(kind: str, eta0: float, N: int, H: int, L: int, alpha_L: float) -> float:
    """Bulk learning rate: SGD eta0*N*H*L**(2a-1), Adam eta0/sqrt(N*H)*L**(a-1)."""
    if min(N, H, L) < 1:
        raise ContractError("sizes must be positive")
    if kind == "sgd":
        return eta0 * N * H * L ** (2 * alpha_L - 1)
    if kind == "adam":
        return eta0 * N**-0.5 * H**-0.5 * L ** (-1 + alpha_L)
    raise ContractError(f"unknown optimizer kind {kind!r}")


def lr_for(config: ModelConfig, opt: OptimizerConfig) -> float:
    lr = scaled_lr(opt.kind, opt.eta0, config.N, config.H, config.L, config.alpha_L)
    if opt.lr_includes_gamma0:
        lr *= config.gamma0**2
    return lr


def group_multipliers(
    kind: str,
    L: int,
    beta0: float,
    alpha_L: float = 1.0,
    adam_scale: int = 0,
    width: int = 1,
) -> dict[str, dict[str, float]]:
    """Forward multiplier and init std per parameter group.

    ``kind`` is accepted for symmetry with :func:`scaled_lr`; the rescale is
    selected by ``adam_scale`` exactly as in the model.
    """
    if L < 1:
        raise ContractError("L must be >= 1")
    if kind not in ("sgd", "adam"):
        raise ContractError(f"unknown optimizer kind {kind!r}")
    cfg = ModelConfig(N=width, H=1, L=L, beta0=beta0, alpha_L=alpha_L, adam_scale=adam_scale)
    c = edge_multiplier(cfg)
    edge = {"forward": c, "init_std": 1.0 / c}
    return {
        "read_in": dict(edge),
        "positional": dict(edge),
        "bulk": {"forward": 1.0, "init_std": 1.0},
        "read_out": dict(edge),
    }


def _check_grads(grads: dict[str, np.ndarray]):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(-1, f"gradient in {name}")


def sgd_step(params: dict[str, np.ndarray], grads, lr: float, momentum: float = 0.0, state=None):
    """theta <- theta - lr * buf, buf <- momentum * buf + g (classical momentum)."""
    _check_grads(grads)
    state = {} if state is None else state
    new_params, new_state = {}, {}
    for name, theta in params.items():
        g = grads[name]
        if momentum:
            buf = momentum * state[name] + g if name in state else g.copy()
            new_state[name] = buf
            g = buf
        new_params[name] = theta - lr * g
    return new_params, new_state


def _sgd_step_inplace(theta: dict[str, np.ndarray], grads, lr: float, momentum: float, state: dict):
    # Same arithmetic as sgd_step, reusing buffers owned by train().
    _check_grads(grads)
    for name, t in theta.items():
        g = grads[name]
        if momentum:
            if name in state:
                buf = state[name]
                buf *= momentum
                buf += g
            else:
                buf = state[name] = g.copy()
            t -= lr * buf
        else:
            g *= lr
            t -= g
    return theta, state


def adam_step(params: dict[str, np.ndarray], grads, lr: float, config: OptimizerConfig, state=None):
    """Bias-corrected Adam; ``state`` holds the step count and both moments."""
    _check_grads(grads)
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    state = {"t": 0, "m": {}, "v": {}} if not state else state
    t = state["t"] + 1
    m_new, v_new, new_params = {}, {}, {}
    for name, theta in params.items():
        g = grads[name]
        m = b1 * state["m"].get(name, 0.0) + (1 - b1) * g
        v = b2 * state["v"].get(name, 0.0) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_params[name] = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_new[name], v_new[name] = m, v
    return new_params, {"t": t, "m": m_new, "v": v_new}


Probe = Callable[[int, Params, object], dict]


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    diverged_at: int | None = None
    probes: list[tuple[int, str, dict]] = field(default_factory=list)

    @property
    def diverged(self) -> bool:
        return self.diverged_at is not None


def train(
    params: Params,
    config: ModelConfig,
    opt: OptimizerConfig,
    dataset,
    probes: dict[str, tuple[list[int], Probe]] | None = None,
    loss_kind: str | None = None,
) -> tuple[Params, TrainLog]:
    """Run exactly ``opt.steps`` updates on the dataset's fixed minibatches.

    ``probes`` maps a name to (steps, fn); fn(step, params, trace) is called
    with the parameters *before* the update at that step (step == opt.steps
    means after the last update). A non-finite loss or gradient stops the run
    and is recorded in ``log.diverged_at``.
    """
    loss_kind = loss_kind or getattr(dataset, "loss_kind", "mse")
    probes = probes or {}
    lr = lr_for(config, opt)
    theta = {k: np.array(v, dtype=np.float64) for k, v in params.tensors.items()}
    state = None if opt.kind == "adam" else {}
    log_ = TrainLog()

    def run_probes(step, trace):
        snapshot = Params({k: v.copy() for k, v in theta.items()})
        for name, (when, fn) in probes.items():
            if step in when:
                log_.probes.append((step, name, fn(step, snapshot, trace)))

    for step in range(opt.steps + 1):
        want_probe = any(step in when for when, _ in probes.values())
        if step == opt.steps:
            if want_probe:
                run_probes(step, None)
            break
        xb, yb = dataset.batch(step)
        try:
            loss, grads, trace = loss_and_grads(Params(theta), config, xb, yb, loss_kind)
            if not math.isfinite(loss):
                raise NumericError(-1, "loss")
        except (NumericError, FloatingPointError) as exc:
            log.info("diverged at step %d: %s", step, exc)
            log_.diverged_at = step
            break
        log_.losses.append(loss)
        if want_probe:
            run_probes(step, trace)
        try:
            if opt.kind == "sgd":
                theta, state = _sgd_step_inplace(theta, grads, lr, opt.momentum, state)
            else:
                theta, state = adam_step(theta, grads, lr, opt, state)
        except NumericError as exc:
            log.info("diverged at step %d: %s", step, exc)
            log_.diverged_at = step
            break
    return Params(theta), log_
