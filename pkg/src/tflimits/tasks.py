"""Deterministic synthetic datasets with fixed minibatch schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffcore import ContractError

MAX_SAMPLES = 4096


@dataclass(frozen=True)
class Dataset:
    mode: str
    inputs: np.ndarray
    targets: np.ndarray
    batch_size: int
    seed: int
    loss_kind: str

    def __post_init__(self):
        n = len(self.inputs)
        if n < 1 or n > MAX_SAMPLES:
            raise ContractError(f"dataset size must be in [1, {MAX_SAMPLES}], got {n}")
        if not 1 <= self.batch_size <= n:
            raise ContractError(f"batch size must be in [1, {n}]")
        for a in (self.inputs, self.targets):
            a.setflags(write=False)

    @property
    def n_samples(self) -> int:
        return len(self.inputs)

    def batch_indices(self, step: int) -> np.ndarray:
        """Indices of minibatch ``step``; a pure function of (seed, step).

        Batches walk through a stream of per-epoch permutations, so every
        sample is visited once before any repeats. Full batch GD
        (batch_size == n_samples) always returns all samples in order.
        """
        n, b = self.n_samples, self.batch_size
        if b == n:
            return np.arange(n)
        start = step * b
        out = []
        for pos in range(start, start + b):
            epoch, off = divmod(pos, n)
            out.append(_epoch_perm(self.seed, epoch, n)[off])
        return np.asarray(out)

    def batch(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        idx = self.batch_indices(step)
        return self.inputs[idx], self.targets[idx]

    def full(self) -> tuple[np.ndarray, np.ndarray]:
        return self.inputs, self.targets


def _epoch_perm(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 7, epoch]).permutation(n)


def _check_sizes(**sizes):
    for k, v in sizes.items():
        if v < 1:
            raise ContractError(f"{k} must be positive")


def make_regression(seed, n_samples, S, D, teacher_scale=1.0, batch_size=None) -> Dataset:
    """Gaussian tokens; target = teacher_scale * beta . mean_s(x_s) * sqrt(S / D)."""
    _check_sizes(n_samples=n_samples, S=S, D=D)
    rng = np.random.default_rng([seed, 1])
    x = rng.standard_normal((n_samples, S, D))
    beta = rng.standard_normal(D)
    y = teacher_scale * (x.mean(axis=1) @ beta) * math.sqrt(S / D)
    return Dataset("pooled_classifier", x, y.reshape(-1, 1), batch_size or n_samples, seed, "mse")


def make_classification(seed, n_samples, S, D, n_classes, batch_size=None) -> Dataset:
    """Gaussian tokens with random fixed labels (a memorisation task)."""
    _check_sizes(n_samples=n_samples, S=S, D=D, n_classes=n_classes)
    if n_classes > n_samples:
        raise ContractError("n_classes must not exceed n_samples")
    rng = np.random.default_rng([seed, 2])
    x = rng.standard_normal((n_samples, S, D))
    labels = rng.integers(0, n_classes, n_samples)
    return Dataset("pooled_classifier", x, labels, batch_size or n_samples, seed, "cross_entropy")


def make_induction(seed, n_samples, S, vocab, plant=True, batch_size=None) -> Dataset:
    """Next-token prediction on random sequences with a planted repeated bigram.

    With ``plant`` each sequence of S+1 tokens holds A B at (i, i+1) and
    again at (j, j+1), j > i + 1, so the target at position j is B. Inputs
    are tokens 0..S-1, targets tokens 1..S.
    """
    if S < 4 or vocab < 3:
        raise ContractError("make_induction needs S >= 4 and vocab >= 3")
    _check_sizes(n_samples=n_samples)
    rng = np.random.default_rng([seed, 3])
    seqs = rng.integers(0, vocab, (n_samples, S + 1))
    if plant:
        for row in seqs:
            i = rng.integers(0, S - 2)
            j = rng.integers(i + 2, S)
            a, b = rng.choice(vocab, 2, replace=False)
            row[i], row[i + 1], row[j], row[j + 1] = a, b, a, b
    return Dataset("causal_lm", seqs[:, :S].copy(), seqs[:, 1:].copy(), batch_size or n_samples, seed,
                   "cross_entropy")


TASK_MODES = {"regression": "pooled_classifier", "classification": "pooled_classifier", "induction": "causal_lm"}


@dataclass(frozen=True)
class DataSpec:
    kind: str = "regression"
    n_samples: int = 16
    teacher_scale: float = 1.0
    n_classes: int = 2
    vocab: int = 8
    batch_size: int = 0  # 0 means full batch
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_MODES:
            raise ContractError(f"task kind must be one of {sorted(TASK_MODES)}, got {self.kind!r}")

    @property
    def mode(self) -> str:
        return TASK_MODES[self.kind]

    def build(self, S: int, D: int) -> Dataset:
        b = self.batch_size or None
        if self.kind == "regression":
            return make_regression(self.seed, self.n_samples, S, D, self.teacher_scale, batch_size=b)
        if self.kind == "classification":
            return make_classification(self.seed, self.n_samples, S, D, self.n_classes, batch_size=b)
        return make_induction(self.seed, self.n_samples, S, self.vocab, batch_size=b)

    def shape_config(self, config):
        """Config with mode, D and O made consistent with this task."""
        if self.kind == "regression":
            return config.with_(mode=self.mode, O=1)
        if self.kind == "classification":
            return config.with_(mode=self.mode, O=self.n_classes)
        return config.with_(mode=self.mode, D=self.vocab, O=self.vocab)
