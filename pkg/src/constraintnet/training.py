"""Mini-batch training with per-visit constraint-parameter sampling.

Each time a sample is visited a fresh ``s`` is drawn from its valid set, so
the same ``(x, y)`` is seen under many constraints and the trunk is pushed
towards predictions that do not depend on which valid ``s`` was supplied.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .constraints import DEFAULT_TOL
from .model import ConstraintNetModel
from .seeding import stream

__all__ = [
    "TrainConfig",
    "EpochRecord",
    "TrainReport",
    "InvalidConstraintParameter",
    "InvariantBreach",
    "SGD",
    "Adam",
    "make_optimizer",
    "train",
    "invariance_metric",
    "evaluate",
    "EvalResult",
]

Sampler = Callable[[np.ndarray, np.random.Generator], np.ndarray]


class InvalidConstraintParameter(ValueError):
    """The sampler produced an ``s`` whose region does not contain ``y``."""


class InvariantBreach(AssertionError):
    """A model output left its constraint region. Always a library bug."""

    def __init__(self, message: str, x=None, s=None, y=None):
        super().__init__(message)
        self.x, self.s, self.y = x, s, y


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    resample_per_epoch: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError(f"invalid training config {self}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    invariance: float
    seconds: float


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)

    FIELDS = ("epoch", "train_loss", "val_loss", "invariance", "seconds")

    def to_csv(self, timing: bool = True) -> str:
        fields = self.FIELDS if timing else self.FIELDS[:-1]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(fields)
        for r in self.records:
            row = [r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.invariance)]
            writer.writerow(row + [f"{r.seconds:.3f}"] if timing else row)
        return buf.getvalue()

    def to_json(self, timing: bool = True) -> str:
        records = [asdict(r) for r in self.records]
        if not timing:
            for r in records:
                del r["seconds"]
        return json.dumps({"records": records}, indent=1)

    def without_timing(self) -> list[tuple]:
        return [(r.epoch, r.train_loss, r.val_loss, r.invariance) for r in self.records]


class SGD:
    def __init__(self, params, lr: float):
        self.params, self.lr = list(params), lr

    def step(self) -> None:
        for p in self.params:
            p.data -= self.lr * p.grad


class Adam:
    def __init__(self, params, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(model: ConstraintNetModel, config: TrainConfig):
    params = model.parameter_list()
    if config.optimizer == "sgd":
        return SGD(params, config.learning_rate)
    return Adam(params, config.learning_rate, config.beta1, config.beta2, config.eps)


def _loss(model: ConstraintNetModel, x, s, y, weight_decay: float) -> ad.Tensor:
    loss = ad.mse_loss(model.forward(x, s), y)
    if weight_decay > 0:
        for w in model.weights():
            loss = ad.add(loss, ad.mul(ad.square_sum(w), weight_decay))
    return loss


def _draw(sampler: Sampler, model: ConstraintNetModel, y: np.ndarray, idx, rng, fixed_s):
    if fixed_s is not None:
        return np.asarray(fixed_s)[idx]
    s = np.stack([np.asarray(sampler(y[i], rng), dtype=np.float64) for i in idx])
    for i, si in zip(idx, s):
        if not model.constraint.member(y[i], si, DEFAULT_TOL):
            raise InvalidConstraintParameter(
                f"sampler produced s={si.tolist()} whose region excludes y[{i}]={y[i].tolist()}"
            )
    return s


def train_step(model, optimizer, x, s, y, weight_decay: float = 0.0) -> float:
    """One gradient update on a batch; returns the batch loss."""
    with ad.Tape() as tape:
        loss = _loss(model, x, s, y, weight_decay)
        tape.backward(loss)
    optimizer.step()
    return float(loss.data)


def train(
    model: ConstraintNetModel,
    X,
    Y,
    sampler: Sampler | None = None,
    config: TrainConfig | None = None,
    fixed_s=None,
    validation: tuple | None = None,
    invariance_probe: Sequence[int] | None = None,
    invariance_draws: int = 20,
    callback: Callable[[EpochRecord], None] | None = None,
) -> tuple[ConstraintNetModel, TrainReport]:
    """Train ``model`` in place and return it with a per-epoch report.

    ``validation`` is a fixed ``(X_val, S_val, Y_val)`` triple set.
    ``fixed_s`` replaces the sampler when each sample has exactly one valid
    parameter. ``invariance_probe`` lists validation indices on which the
    invariance metric is tracked (needs ``sampler``).
    """
    config = config or TrainConfig()
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if len(X) == 0 or len(X) != len(Y):
        raise ValueError(f"dataset must be nonempty with matching lengths, got {len(X)} / {len(Y)}")
    if sampler is None and fixed_s is None:
        raise ValueError("train needs a sampler or fixed constraint parameters")
    if fixed_s is not None:
        for i, si in enumerate(np.asarray(fixed_s)):
            if not model.constraint.member(Y[i], si, DEFAULT_TOL):
                raise InvalidConstraintParameter(f"fixed s[{i}] excludes y[{i}]")
    optimizer = make_optimizer(model, config)
    order_rng = stream(config.seed, "shuffle")
    sample_rng = stream(config.seed, "constraint-sampling")
    probe_rng = stream(config.seed, "invariance")
    report = TrainReport()
    n = len(X)
    cached_s = None
    if not config.resample_per_epoch and fixed_s is None:
        cached_s = _draw(sampler, model, Y, np.arange(n), sample_rng, None)
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = order_rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            if cached_s is not None:
                s = cached_s[idx]
            else:
                s = _draw(sampler, model, Y, idx, sample_rng, fixed_s)
            total += train_step(model, optimizer, X[idx], s, Y[idx], config.weight_decay) * len(idx)
            count += len(idx)
        val_loss = float("nan")
        inv = float("nan")
        if validation is not None:
            xv, sv, yv = validation
            val_loss = evaluate(model, xv, yv, S=sv).mean_loss
            if invariance_probe is not None and sampler is not None:
                inv = max(
                    invariance_metric(model, xv[i], yv[i], sampler, invariance_draws, probe_rng)
                    for i in invariance_probe
                )
        record = EpochRecord(epoch, total / count, val_loss, inv, time.perf_counter() - t0)
        report.records.append(record)
        if callback is not None:
            callback(record)
    return model, report


def invariance_metric(model, x, y, sampler: Sampler, n_draws: int, rng=None) -> float:
    """Largest per-component std-dev of predictions under ``n_draws`` valid s."""
    if n_draws < 2:
        raise ValueError("invariance_metric needs n_draws >= 2")
    rng = rng if rng is not None else np.random.default_rng(0)
    s = np.stack([np.asarray(sampler(np.asarray(y), rng), dtype=np.float64) for _ in range(n_draws)])
    xs = np.repeat(np.asarray(x, dtype=np.float64)[None], n_draws, axis=0)
    pred = model.predict(xs, s)
    # shift-invariant; makes identical predictions give exactly 0
    return float((pred - pred[0]).std(axis=0).max())


@dataclass
class EvalResult:
    mean_loss: float
    mae: np.ndarray
    violations: int


def evaluate(model, X, Y, S=None, sampler: Sampler | None = None, rng=None, tol: float = DEFAULT_TOL) -> EvalResult:
    """Loss, per-component MAE and membership check of every prediction.

    Raises :class:`InvariantBreach` on any membership violation.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("evaluate needs a nonempty dataset")
    if S is None:
        if sampler is None:
            raise ValueError("evaluate needs S or a sampler")
        rng = rng if rng is not None else np.random.default_rng(0)
        S = np.stack([sampler(y, rng) for y in Y])
    S = np.asarray(S, dtype=np.float64)
    pred = np.concatenate(
        [model.predict(X[i : i + 256], S[i : i + 256]) for i in range(0, len(X), 256)], axis=0
    )
    for i in range(len(X)):
        if not model.constraint.member(pred[i], S[i], tol):
            raise InvariantBreach(
                f"prediction {pred[i].tolist()} outside C(s) for sample {i}", X[i], S[i], pred[i]
            )
    err = pred - Y
    return EvalResult(float(np.mean(err * err)), np.mean(np.abs(err), axis=0), 0)
