"""Training loop, evaluation and the architecture ablation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import seeding
from ..io import atomic_write_bytes
from .arch import ArchConfig
from .data import Prepared, prepare
from .model import NetworkParams, backward, forward_batch, init_network, mae, predict
from .optim import OptimState, adam_step

HISTORY_FIELDS = ("epoch", "train_loss", "train_mae", "test_mae")
ABLATION_FIELDS = ("architecture", "features", "fusion", "final_loss", "train_mae_peak", "test_mae",
                   "mean_baseline_mae")


def _as_prepared(data, n_points: int, seed: int = 0) -> Prepared | None:
    if data is None:
        return None
    if isinstance(data, Prepared):
        return data
    return prepare(data, n_points, seed)


def splits_of(dataset, n_points: int = 256, seed: int = 0) -> tuple[Prepared, Prepared | None]:
    """(train, test) arrays from a Dataset or from a ready (train, test) pair."""
    if isinstance(dataset, tuple):
        train, test = dataset
        return _as_prepared(train, n_points, seed), _as_prepared(test, n_points, seed)
    test = dataset.split("test")
    return prepare(dataset.split("train"), n_points, seed), (prepare(test, n_points, seed) if test else None)


def evaluate(params: NetworkParams, split) -> float:
    """MAE over a split (list of samples or prepared arrays)."""
    data = _as_prepared(split, params.arch.points_per_sample)
    if data is None or len(data) == 0:
        raise ValueError("cannot evaluate on an empty split")
    preds = predict(params, data.points_for(params.arch), data.imu)
    return mae(preds, data.labels)


def mean_baseline_mae(train_labels, test_labels) -> float:
    """MAE of always predicting the mean training label."""
    return mae(np.full(len(test_labels), float(np.mean(train_labels))), test_labels)


def train(dataset, arch: ArchConfig, epochs: int = 300, batch_size: int = 32, seed: int = 0,
          init: NetworkParams | None = None, callback=None, lr: float = 1e-3,
          warmup_steps: int | None = None) -> tuple[NetworkParams, list[dict]]:
    """Minibatch ADAM on the mean L1 loss; returns final params and per-epoch history.

    ``dataset`` is a Dataset or a (train, test) pair of sample lists or
    Prepared arrays; the test split may be None.

    The learning rate ramps linearly up to ``lr`` over ``warmup_steps``
    minibatches (default: one epoch).  Without the ramp, ADAM's first
    near-sign-sized steps can push every logit deep into the sigmoid's flat
    tail, where most labels being exactly 0 keeps it until the gradients
    fall below ``eps``.
    """
    if epochs < 0 or batch_size < 1:
        raise ValueError("epochs must be >= 0 and batch_size >= 1")
    if warmup_steps is not None and warmup_steps < 0:
        raise ValueError("warmup_steps must be non-negative")
    train_data, test_data = splits_of(dataset, arch.points_per_sample)
    if len(train_data) == 0:
        raise ValueError("empty training split")
    params = init if init is not None else init_network(arch, seeding.derive_seed(seed, seeding.TRAIN, 0))
    if params.arch != arch:
        raise ValueError("initial parameters belong to a different architecture")
    opt = OptimState.zeros(params, lr=lr)
    rng = np.random.default_rng(seeding.derive_seed(seed, seeding.TRAIN, 1))
    x_train = train_data.points_for(arch)
    x_test = test_data.points_for(arch) if test_data is not None and len(test_data) else None
    imu_train = train_data.imu if arch.uses_imu else None
    history = []
    n = len(train_data)
    warmup = math.ceil(n / batch_size) if warmup_steps is None else warmup_steps
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = np.sort(order[start:start + batch_size])
            _, cache = forward_batch(params, x_train[idx], None if imu_train is None else imu_train[idx])
            grads, loss = backward(params, train_data.labels[idx], cache)
            if opt.step < warmup:
                opt = replace(opt, lr=lr * (opt.step + 1) / warmup)
            elif opt.lr != lr:
                opt = replace(opt, lr=lr)
            params, opt = adam_step(params, grads, opt)
            total += loss * len(idx)
        row = {
            "epoch": epoch,
            "train_loss": total / n,
            "train_mae": mae(predict(params, x_train, train_data.imu), train_data.labels),
            "test_mae": (mae(predict(params, x_test, test_data.imu), test_data.labels)
                         if x_test is not None else math.nan),
        }
        history.append(row)
        if callback:
            callback(row)
    return params, history


def overfit(samples, arch: ArchConfig, steps: int = 2000, seed: int = 0) -> tuple[NetworkParams, list[float]]:
    """Full-batch training on a handful of samples; returns params and per-step MAE."""
    data = _as_prepared(samples, arch.points_per_sample)
    params = init_network(arch, seeding.derive_seed(seed, seeding.TRAIN, 0))
    opt = OptimState.zeros(params)
    x = data.points_for(arch)
    imu = data.imu if arch.uses_imu else None
    trace = []
    for _ in range(steps):
        _, cache = forward_batch(params, x, imu)
        grads, loss = backward(params, data.labels, cache)
        trace.append(loss)
        params, opt = adam_step(params, grads, opt)
    return params, trace


def history_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_FIELDS)
    for row in history:
        w.writerow([row["epoch"]] + [f"{row[k]:.6f}" for k in HISTORY_FIELDS[1:]])
    return buf.getvalue()


def write_history(path, history: list[dict]) -> None:
    atomic_write_bytes(Path(path), history_csv(history).encode())


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{"epoch": int(r["epoch"]), **{k: float(r[k]) for k in HISTORY_FIELDS[1:]}} for r in rows]


@dataclass
class AblationResult:
    rows: list[dict]
    params: dict[str, NetworkParams] = field(default_factory=dict)
    histories: dict[str, list[dict]] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ABLATION_FIELDS)
        for r in self.rows:
            w.writerow([r["architecture"], r["features"], r["fusion"]]
                       + [f"{r[k]:.4f}" for k in ABLATION_FIELDS[3:]])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        atomic_write_bytes(Path(path), self.to_csv().encode())


def run_ablation(dataset, configs, seed: int = 0, epochs: int = 300, batch_size: int = 32,
                 callback=None) -> AblationResult:
    """Train every architecture with the same seed and budget.

    Each row carries the final-epoch loss, the best train MAE over epochs,
    the final test MAE and the mean-label baseline on the test split.
    """
    configs = list(configs)
    if not configs:
        raise ValueError("need at least one architecture")
    prepared = {}
    result = AblationResult([])
    for arch in configs:
        if arch.points_per_sample not in prepared:
            prepared[arch.points_per_sample] = splits_of(dataset, arch.points_per_sample)
        train_data, test_data = prepared[arch.points_per_sample]
        if test_data is None or len(test_data) == 0:
            raise ValueError("the ablation needs a non-empty test split")
        params, history = train((train_data, test_data), arch, epochs, batch_size, seed,
                                callback=(lambda row, a=arch: callback(a, row)) if callback else None)
        final_loss = history[-1]["train_loss"] if history else math.nan
        peak = min(h["train_mae"] for h in history) if history else evaluate(params, train_data)
        test = evaluate(params, test_data)
        result.rows.append({
            "architecture": arch.label, "features": arch.point_features, "fusion": arch.fusion,
            "final_loss": final_loss, "train_mae_peak": peak, "test_mae": test,
            "mean_baseline_mae": mean_baseline_mae(train_data.labels, test_data.labels),
        })
        result.params[arch.label] = params
        result.histories[arch.label] = history
    return result
