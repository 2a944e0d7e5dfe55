"""Metrics, evaluation reports and the mini-batch training loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import gradcore as gc
from .errors import ConfigError, TrainError
from .gradcore import Module, Tensor

log = logging.getLogger(__name__)

MAPE_FLOOR = 1.0


@dataclass
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 15
    seed: int = 0
    horizons: tuple = (3, 6, 9, 12)

    def __post_init__(self):
        if self.patience >= self.max_epochs:
            raise ConfigError(f"patience {self.patience} must be below max_epochs {self.max_epochs}")
        if self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("batch_size and lr must be positive")


# -- metrics -------------------------------------------------------------------

@dataclass
class HorizonMetrics:
    mae: float
    rmse: float
    mape: float          # percent; NaN when every target is masked
    mape_defined: bool = True


def _metrics(err: np.ndarray, y: np.ndarray) -> HorizonMetrics:
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err * err)))
    keep = y >= MAPE_FLOOR
    if not keep.any():
        return HorizonMetrics(mae, rmse, float("nan"), False)
    mape = float(np.mean(np.abs(err[keep]) / y[keep]) * 100.0)
    return HorizonMetrics(mae, rmse, mape, True)


def metrics(y_hat, y, horizon: int | None = None) -> HorizonMetrics:
    """MAE, RMSE and MAPE in original units.

    Arrays are ``[..., t_out]``; with ``horizon`` (1-based) only that step is
    scored.  MAPE skips targets below 1 vehicle count.
    """
    y_hat = np.asarray(y_hat, dtype=float)
    y = np.asarray(y, dtype=float)
    if y_hat.shape != y.shape:
        raise ValueError(f"prediction {y_hat.shape} and target {y.shape} differ")
    if horizon is not None:
        if not 1 <= horizon <= y.shape[-1]:
            raise ValueError(f"horizon {horizon} outside 1..{y.shape[-1]}")
        y_hat, y = y_hat[..., horizon - 1], y[..., horizon - 1]
    return _metrics(y_hat - y, y)


@dataclass
class EvalReport:
    per_horizon: dict
    per_step: list
    overall: HorizonMetrics

    def rows(self, variant: str, seed: int) -> list[dict]:
        return [{"variant": variant, "horizon": h, "mae": m.mae, "rmse": m.rmse,
                 "mape": m.mape, "seed": seed} for h, m in self.per_horizon.items()]


def evaluate(y_hat, y, horizons: Sequence[int] = (3, 6, 9, 12)) -> EvalReport:
    """Per-horizon metrics plus the plain mean of per-step metrics over all steps."""
    y_hat = np.asarray(y_hat, dtype=float)
    y = np.asarray(y, dtype=float)
    steps = [metrics(y_hat, y, h) for h in range(1, y.shape[-1] + 1)]
    mapes = [m.mape for m in steps if m.mape_defined]
    overall = HorizonMetrics(float(np.mean([m.mae for m in steps])),
                             float(np.mean([m.rmse for m in steps])),
                             float(np.mean(mapes)) if mapes else float("nan"), bool(mapes))
    return EvalReport({h: steps[h - 1] for h in horizons}, steps, overall)


# -- training ------------------------------------------------------------------

@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_mae: float = math.inf
    state: dict = field(default_factory=dict)
    seconds: float = 0.0


def predict_batches(model: Module, x_norm: np.ndarray, denorm: Callable, batch: int = 256) -> np.ndarray:
    out = []
    with gc.no_grad():
        for i in range(0, len(x_norm), batch):
            out.append(denorm(model(Tensor(x_norm[i:i + batch]))).data)
    return np.concatenate(out) if out else np.zeros((0,))


def train(model: Module, x_train: np.ndarray, y_train: np.ndarray, x_val: np.ndarray, y_val: np.ndarray,
          config: TrainConfig, denorm: Callable[[Tensor], Tensor],
          history_path=None) -> TrainResult:
    """Adam on MAE in original units with early stopping on validation MAE.

    ``x_*`` are normalised inputs; ``y_*`` raw targets; ``denorm`` maps the
    model's normalised output back to original units inside the graph.  The
    best-validation parameters are loaded back into ``model`` before returning.
    """
    if len(x_train) == 0 or len(x_val) == 0:
        raise ConfigError("train and validation sets must be non-empty")
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    opt = gc.Adam(params, lr=config.lr, weight_decay=config.weight_decay)
    result = TrainResult()
    stale = 0
    t0 = time.perf_counter()
    fh = open(history_path, "w") if history_path is not None else None
    try:
        for epoch in range(1, config.max_epochs + 1):
            order = rng.permutation(len(x_train))
            total = 0.0
            for i in range(0, len(order), config.batch_size):
                idx = order[i:i + config.batch_size]
                opt.zero_grad()
                with gc.tape_scope() as tape:
                    pred = denorm(model(Tensor(x_train[idx])))
                    loss = gc.mean(gc.abs_(gc.sub(pred, y_train[idx])))
                    gc.backward(loss, tape)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainError(f"loss became {value} in epoch {epoch}", epoch)
                opt.step()
                total += value * len(idx)
            train_loss = total / len(order)
            val_mae = float(np.mean(np.abs(predict_batches(model, x_val, denorm) - y_val)))
            if not math.isfinite(val_mae):
                raise TrainError(f"validation MAE became {val_mae} in epoch {epoch}", epoch)
            entry = {"epoch": epoch, "train_loss": train_loss, "val_mae": val_mae}
            result.history.append(entry)
            if fh is not None:
                fh.write(json.dumps(entry) + "\n")
            log.debug("epoch %d train %.4f val %.4f", epoch, train_loss, val_mae)
            if val_mae < result.best_val_mae:
                result.best_val_mae = val_mae
                result.best_epoch = epoch
                result.state = model.state_dict()
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    finally:
        if fh is not None:
            fh.close()
    model.load_state_dict(result.state)
    result.seconds = time.perf_counter() - t0
    return result


def write_report_csv(path, rows: list[dict]) -> None:
    import csv

    cols = ["variant", "horizon", "mae", "rmse", "mape", "seed"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
