"""Losses, Adam, the training loop, and forecast metrics.

The prediction loss is mean absolute error averaged uniformly over
batch, horizon steps, and channels; the total training loss adds the
quantizer's commitment term weighted by ``lambda1``. Training keeps the
checkpoint with the lowest validation prediction loss and restores it at
the end. Everything is deterministic under the run seed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .data import WindowDataset, seasonal_period
from .errors import ConfigurationError, NumericError, ShapeMismatchError
from .model import Forecaster


@dataclass
class LossConfig:
    lambda1: float = 0.25

    def __post_init__(self):
        if self.lambda1 < 0:
            raise ConfigurationError("lambda1 must be >= 0")


def prediction_loss(pred: T.Tensor, truth: T.Tensor) -> T.Tensor:
    """Mean absolute error over (batch, step, channel), uniform weights."""
    if pred.data.shape != truth.data.shape:
        raise ShapeMismatchError(
            f"prediction loss operands differ: {pred.shape} vs {truth.shape}")
    return T.tmean(T.absolute(T.sub(pred, truth)))


def total_loss(pred: T.Tensor, truth: T.Tensor,
               commitment: Optional[T.Tensor],
               cfg: LossConfig) -> T.Tensor:
    """Prediction loss plus lambda1 times the commitment loss."""
    base = prediction_loss(pred, truth)
    if commitment is None or cfg.lambda1 == 0.0:
        return base
    return T.add(base, T.scale(commitment, cfg.lambda1))


@dataclass
class TrainState:
    """Adam state over a named parameter map."""

    params: dict
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    best_val: float = math.inf
    seed: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, t in self.params.items():
            self.m.setdefault(name, np.zeros_like(t.data))
            self.v.setdefault(name, np.zeros_like(t.data))


def adam_step(state: TrainState, grads: dict) -> TrainState:
    """One bias-corrected Adam update, in place on the parameters."""
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in state.params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def _batched_prediction_mae(model: Forecaster, dataset: WindowDataset,
                            batch_size: int = 64) -> float:
    total = 0.0
    count = 0
    for start in range(0, dataset.n_windows, batch_size):
        xb = dataset.inputs[start:start + batch_size]
        yb = dataset.targets[start:start + batch_size]
        pred = model.predict(xb)
        total += float(np.abs(pred - yb).sum())
        count += yb.size
    return total / count


def fit(model: Forecaster, datasets, epochs: int = 50, batch_size: int = 64,
        lr: float = 1e-4, loss_cfg: Optional[LossConfig] = None,
        early_stop_patience: int = 5, seed: int = 0, log=None):
    """Mini-batch training with validation-best checkpointing.

    ``datasets`` is (train, val) or (train, val, test); only the first
    two are used here. Returns (model, history) where history holds one
    row per epoch: train_loss, val_loss, commit_loss, perplexity. The
    returned model carries the parameters of the epoch with the lowest
    validation prediction loss.
    """
    train, val = datasets[0], datasets[1]
    if train.n_windows < 1:
        raise ConfigurationError("training split has no windows")
    loss_cfg = loss_cfg or LossConfig()
    state = TrainState(params=model.parameters(), lr=lr, seed=seed)
    rng = np.random.default_rng(seed)
    dropout_rng = (np.random.default_rng(seed + 1)
                   if model.config.dropout > 0 else None)

    history = []
    best_state = None
    stale = 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(train.n_windows)
        if model.quantizer is not None:
            model.quantizer.reset_usage()
        epoch_losses = []
        epoch_commits = []
        for bstart in range(0, len(order), batch_size):
            idx = order[bstart:bstart + batch_size]
            xb = T.Tensor(train.inputs[idx])
            yb = T.Tensor(train.targets[idx])
            model.zero_grad()
            with T.Tape():
                pred, commit = model.forward(xb, dropout_rng=dropout_rng)
                loss = total_loss(pred, yb, commit, loss_cfg)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise NumericError(
                        f"training diverged: loss is not finite at epoch "
                        f"{epoch}, step {state.step + 1}")
                T.backward(loss)
            grads = {k: t.grad for k, t in state.params.items()
                     if t.grad is not None}
            adam_step(state, grads)
            epoch_losses.append(value)
            if commit is not None:
                epoch_commits.append(float(commit.data))

        val_loss = _batched_prediction_mae(model, val, batch_size)
        if model.quantizer is not None and \
                model.quantizer.codebooks[0].usage_counts.sum() > 0:
            perplexity = model.quantizer.stats()["perplexity"]
        else:
            perplexity = math.nan
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(epoch_losses)),
            "val_loss": val_loss,
            "commit_loss": float(np.mean(epoch_commits)) if epoch_commits
            else math.nan,
            "perplexity": perplexity,
        }
        history.append(row)
        if log is not None:
            log(row)

        if val_loss < state.best_val:
            state.best_val = val_loss
            best_state = model.state_arrays()
            stale = 0
        else:
            stale += 1
            if stale >= early_stop_patience:
                break

    if best_state is not None:
        model.load_state_arrays(best_state)
    return model, history


def history_to_csv(history, path) -> None:
    cols = ["epoch", "train_loss", "val_loss", "commit_loss", "perplexity"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in cols})


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def smape(pred: np.ndarray, truth: np.ndarray) -> float:
    """(200/n) * sum |p - t| / (|p| + |t|); 0/0 terms count as zero."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    denom = np.abs(pred) + np.abs(truth)
    terms = np.where(denom == 0.0, 0.0, np.abs(pred - truth)
                     / np.where(denom == 0.0, 1.0, denom))
    return 200.0 * float(terms.mean())


def seasonal_naive_mae(segment: np.ndarray, period: int) -> float:
    """In-sample MAE of the seasonal naive forecast on a raw segment."""
    if segment.shape[0] <= period:
        raise ConfigurationError(
            f"segment of {segment.shape[0]} steps too short for seasonal "
            f"period {period}")
    return float(np.abs(segment[period:] - segment[:-period]).mean())


def repeat_last_baseline(dataset: WindowDataset) -> np.ndarray:
    """Repeat each input window's final value across the horizon."""
    last = dataset.inputs[:, -1:, :]
    return np.repeat(last, dataset.horizon, axis=1)


def evaluate(model: Forecaster, dataset: WindowDataset,
             train_dataset: Optional[WindowDataset] = None,
             naive2: Optional[dict] = None, batch_size: int = 64) -> dict:
    """Forecast metrics on a window dataset.

    MASE scales by the seasonal naive error of the training segment (the
    period comes from the dataset's frequency label, default 1) and is
    omitted when no training split is given. OWA needs a Naive2
    reference dict with keys ``smape`` and ``mase``.
    """
    if dataset.n_windows < 1:
        raise ConfigurationError("evaluation dataset has no windows")
    sse = 0.0
    sae = 0.0
    count = 0
    smape_sum = 0.0
    for start in range(0, dataset.n_windows, batch_size):
        xb = dataset.inputs[start:start + batch_size]
        yb = dataset.targets[start:start + batch_size]
        pred = model.predict(xb)
        diff = pred - yb
        sse += float((diff * diff).sum())
        sae += float(np.abs(diff).sum())
        denom = np.abs(pred) + np.abs(yb)
        terms = np.where(denom == 0.0, 0.0,
                         np.abs(diff) / np.where(denom == 0.0, 1.0, denom))
        smape_sum += float(terms.sum())
        count += yb.size

    out = {
        "mse": sse / count,
        "mae": sae / count,
        "smape": 200.0 * smape_sum / count,
        "mase": None,
        "owa": None,
    }
    if train_dataset is not None:
        period = seasonal_period(dataset.frequency_label)
        scale = seasonal_naive_mae(train_dataset.segment, period)
        if scale > 0:
            out["mase"] = out["mae"] / scale
    if naive2 is not None and out["mase"] is not None:
        if naive2.get("smape", 0) > 0 and naive2.get("mase", 0) > 0:
            out["owa"] = 0.5 * (out["smape"] / naive2["smape"]
                                + out["mase"] / naive2["mase"])
    return out
