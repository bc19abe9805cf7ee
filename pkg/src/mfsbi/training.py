"""Minibatch NLL training with Adam and validation-based early stopping.

The stopping criterion tracks the lowest validation loss seen so far and
halts after `patience` consecutive epochs without a new optimum; training
returns the parameter snapshot from the best epoch, not the last one.

theta is handled in boxspace: the logit transform of each row and its
log-det are data-only quantities, so they are precomputed per split and the
log-det enters the reported loss as an additive constant.  The loss value is
therefore the full mean -log q(theta|x) in original coordinates.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import engine as en
from .engine import Adam, NonFiniteError, Tape, Tensor, backward
from .flow import ConditionalDensityEstimator, Standardizer


class TrainingError(Exception):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 200
    learning_rate: float = 5e-4
    val_fraction: float = 0.1
    patience: int = 20
    max_epochs: int = 2000
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.patience < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("patience, batch_size and max_epochs must be >= 1")


@dataclass
class TrainReport:
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    stop_epoch: int = 0
    stop_reason: str = ""
    wall_time_s: float = 0.0
    n_train: int = 0
    n_val: int = 0

    def best_val_loss(self) -> float:
        return min(self.val_losses)

    def write_jsonl(self, path) -> None:
        """One record per epoch, then a summary record."""
        with open(path, "w") as f:
            for i, (tr, vl) in enumerate(zip(self.train_losses, self.val_losses), start=1):
                f.write(json.dumps({"epoch": i, "train_loss": tr, "val_loss": vl}) + "\n")
            f.write(json.dumps({
                "stop_epoch": self.stop_epoch, "stop_reason": self.stop_reason,
                "wall_time_s": self.wall_time_s, "n_train": self.n_train,
                "n_val": self.n_val}) + "\n")


class EarlyStopping:
    """Tracks the lowest validation loss; on an exact tie the earlier epoch's
    snapshot is kept so training is deterministic."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_params = None
        self.stale = 0

    def update(self, val_loss: float, snapshot_fn) -> bool:
        if val_loss < self.best:
            self.best = val_loss
            self.best_params = snapshot_fn()
            self.stale = 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


def _unwrap(dataset):
    if isinstance(dataset, tuple):
        theta, x = dataset
    else:
        theta, x = dataset.theta, dataset.x
    theta = np.asarray(theta, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if len(theta) != len(x):
        raise ValueError(f"theta ({len(theta)}) and x ({len(x)}) row counts differ")
    return theta, x


def split_train_val(dataset, val_fraction: float, seed):
    """Seeded-shuffle split; val size = round(val_fraction * N)."""
    theta, x = _unwrap(dataset)
    n = len(theta)
    if n < 10:
        raise ValueError(f"dataset too small to split: {n} < 10")
    n_val = int(round(val_fraction * n))
    if n_val < 1 or n_val >= n:
        raise ValueError(f"val_fraction {val_fraction} gives degenerate split for N={n}")
    perm = np.random.default_rng(seed).permutation(n)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    return (theta[train_idx], x[train_idx]), (theta[val_idx], x[val_idx])


def nll_loss(estimator: ConditionalDensityEstimator, batch) -> Tensor:
    """Mean -log q(theta|x) over the batch as a differentiable scalar."""
    theta, x = _unwrap(batch)
    if len(theta) == 0:
        raise ValueError("nll_loss: empty batch")
    theta = np.atleast_2d(theta)
    estimator.box.validate(theta)
    z, ld_box = estimator.box.forward(theta)
    x_flat = x.reshape(len(x), -1)
    if estimator.x_standardizer is not None:
        x_flat = estimator.x_standardizer(x_flat)
    feat = estimator.features_t(Tensor(x_flat))
    lq = estimator.boxspace_log_prob_t(Tensor(z), feat)
    return en.sub(en.mean(en.neg(lq)), float(ld_box.mean()))


def train(estimator: ConditionalDensityEstimator, dataset, config: TrainConfig):
    """Train in place; returns (estimator, TrainReport).

    The x standardizer is fit on the training split only, and only if the
    estimator does not already carry one; an explicit standardizer set by
    the caller is respected (e.g. for sharing statistics across members).
    """
    t0 = time.perf_counter()
    theta, x = _unwrap(dataset)
    if len(theta) == 0:
        raise TrainingError("train: empty dataset")
    rng = np.random.default_rng(config.seed)
    (th_tr, x_tr), (th_va, x_va) = split_train_val((theta, x), config.val_fraction, rng)

    if estimator.x_standardizer is None:
        estimator.x_standardizer = Standardizer.fit(x_tr.reshape(len(x_tr), -1))

    estimator.box.validate(np.atleast_2d(theta))
    z_tr, ld_tr = estimator.box.forward(th_tr)
    z_va, ld_va = estimator.box.forward(th_va)
    xs_tr = estimator.x_standardizer(x_tr.reshape(len(x_tr), -1))
    xs_va = estimator.x_standardizer(x_va.reshape(len(x_va), -1))
    ld_va_mean = float(ld_va.mean())

    params = estimator.params()
    opt = Adam(params, lr=config.learning_rate)
    stopper = EarlyStopping(config.patience)
    report = TrainReport(n_train=len(th_tr), n_val=len(th_va))

    def snapshot():
        return {k: t.data.copy() for k, t in params.items()}

    def val_loss() -> float:
        feat = estimator.features_t(Tensor(xs_va))
        lq = estimator.boxspace_log_prob_t(Tensor(z_va), feat)
        return float(-lq.data.mean() - ld_va_mean)

    n_train = len(th_tr)
    stop_reason = "max_epochs"
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n_train)
        total = 0.0
        for bstart in range(0, n_train, config.batch_size):
            bidx = order[bstart:bstart + config.batch_size]
            try:
                opt.zero_grad()
                with Tape():
                    feat = estimator.features_t(Tensor(xs_tr[bidx]))
                    lq = estimator.boxspace_log_prob_t(Tensor(z_tr[bidx]), feat)
                    loss = en.mean(en.neg(lq))
                    backward(loss)
                opt.step()
            except NonFiniteError as exc:
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {bstart // config.batch_size}: {exc}"
                ) from exc
            total += (loss.item() - ld_tr[bidx].mean()) * len(bidx)
        report.train_losses.append(total / n_train)
        report.val_losses.append(val_loss())
        stopper.update(report.val_losses[-1], snapshot)
        if stopper.should_stop:
            stop_reason = "patience"
            break

    for name, t in params.items():
        t.data[...] = stopper.best_params[name]
        t.grad = None
    report.stop_epoch = epoch
    report.stop_reason = stop_reason
    report.wall_time_s = time.perf_counter() - t0
    return estimator, report
