"""Scikit-learn style forecasters.

All estimators take sample windows ``X [B, 3, N, t_in]`` of raw counts (flow
type order V, P, S) and predict raw V-GCT counts ``[B, N, t_out]``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.metrics import r2_score
from sklearn.utils.validation import check_is_fitted

from . import gradcore as gc
from .cgat import Conv1x1
from .dataio import FlowScaler, SampleSet
from .errors import ConfigError
from .facets import swap_last_axes
from .gradcore import Module, Tensor
from .graphs import SegmentGraph
from .mfgm import MFGM, ModelConfig
from .trainer import TrainConfig, predict_batches, train
from .validation import check_slots, check_windows


class _WindowRegressor(RegressorMixin, BaseEstimator):
    def score(self, X, y, sample_weight=None):
        y = np.asarray(y, dtype=float)
        return r2_score(y.reshape(len(y), -1), self.predict(X).reshape(len(y), -1),
                        sample_weight=sample_weight)


class _NeuralRegressor(_WindowRegressor):
    """Shared fit/predict for models trained with :func:`gctflow.trainer.train`."""

    def _train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.learning_rate, weight_decay=self.weight_decay,
                           batch_size=self.batch_size, max_epochs=self.max_epochs,
                           patience=self.patience, seed=self.random_state)

    def _denorm(self, out: Tensor) -> Tensor:
        mean = self.scaler_.mean_[0][:, None]
        std = self.scaler_.std_[0][:, None]
        return gc.add(gc.hadamard(out, std), mean)

    def fit(self, X, y, eval_set=None, history_path=None):
        """Train on windows; ``eval_set=(X_val, y_val)`` drives early stopping
        (without it the training windows are used)."""
        X, y = check_windows(X, y)
        self.n_segments_ = X.shape[2]
        self.t_in_ = X.shape[3]
        self.t_out_ = y.shape[2]
        X_val, y_val = (X, y) if eval_set is None else check_windows(*eval_set, n_segments=self.n_segments_)
        self.scaler_ = FlowScaler().fit(X)
        self.model_ = self._build()
        result = train(self.model_, self.scaler_.transform(X), y, self.scaler_.transform(X_val), y_val,
                       self._train_config(), self._denorm, history_path=history_path)
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.best_val_mae_ = result.best_val_mae
        self.train_seconds_ = result.seconds
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_windows(X, n_segments=self.n_segments_, t_in=self.t_in_)
        return predict_batches(self.model_, self.scaler_.transform(X), self._denorm)


class MFGMRegressor(_NeuralRegressor):
    """Multifaceted graph model behind the estimator API.

    ``graph`` is the :class:`SegmentGraph` over the N segments; it may be left
    out only when the spatial facet is ablated.
    """

    def __init__(self, graph: SegmentGraph | None = None, channels: int = 32, reduced_channels: int = 8,
                 n_layers: int = 3, skip_channels: int = 64, ablation=(), inputs: str = "all",
                 learning_rate: float = 5e-4, weight_decay: float = 1e-4, batch_size: int = 32,
                 max_epochs: int = 100, patience: int = 15, random_state: int = 0):
        self.graph = graph
        self.channels = channels
        self.reduced_channels = reduced_channels
        self.n_layers = n_layers
        self.skip_channels = skip_channels
        self.ablation = ablation
        self.inputs = inputs
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.random_state = random_state

    def model_config(self, n_segments: int, t_in: int = 12, t_out: int = 12) -> ModelConfig:
        return ModelConfig(channels=self.channels, reduced_channels=self.reduced_channels,
                           layers=self.n_layers, t_in=t_in, t_out=t_out, skip_channels=self.skip_channels,
                           n_segments=n_segments, ablation=frozenset(self.ablation or ()),
                           inputs=self.inputs, seed=self.random_state)

    def _graph(self, n: int) -> SegmentGraph:
        if self.graph is not None:
            return self.graph
        if "S" not in set(self.ablation or ()):
            raise ConfigError("a segment graph is required unless the spatial facet is ablated")
        return SegmentGraph.from_adjacency(np.eye(n))

    def _build(self) -> MFGM:
        cfg = self.model_config(self.n_segments_, self.t_in_, self.t_out_)
        return MFGM(cfg, self._graph(self.n_segments_))

    @classmethod
    def from_parts(cls, config: ModelConfig, graph: SegmentGraph, scaler: FlowScaler,
                   state: dict) -> "MFGMRegressor":
        """Rebuild a fitted regressor from a saved config, graph, scaler and parameters."""
        est = cls(graph=graph, channels=config.channels, reduced_channels=config.reduced_channels,
                  n_layers=config.layers, skip_channels=config.skip_channels,
                  ablation=tuple(sorted(config.ablation)), inputs=config.inputs, random_state=config.seed)
        est.n_segments_, est.t_in_, est.t_out_ = config.n_segments, config.t_in, config.t_out
        est.scaler_ = scaler
        est.model_ = MFGM(config, est._graph(config.n_segments))
        est.model_.load_state_dict(state)
        return est


class TCNLite(Module):
    """Two plain temporal convolutions over all flow types, per segment."""

    def __init__(self, n_types: int, channels: int, t_in: int, t_out: int, rng: np.random.Generator,
                 kernel: int = 5):
        self.t_out = t_out
        self.conv1 = Conv1x1(n_types, channels, rng, kernel=kernel)
        self.conv2 = Conv1x1(channels, t_out, rng, kernel=t_in - kernel + 1)

    def __call__(self, x: Tensor) -> Tensor:
        b, _, n, _ = x.shape
        h = gc.relu(self.conv1(swap_last_axes(x)))          # [B, C, t_in-k+1, N]
        y = gc.reshape(self.conv2(h), (b, self.t_out, n))
        return swap_last_axes(y)


class TCNLiteRegressor(_NeuralRegressor):
    def __init__(self, channels: int = 32, kernel: int = 5, learning_rate: float = 5e-4,
                 weight_decay: float = 1e-4, batch_size: int = 32, max_epochs: int = 100,
                 patience: int = 15, random_state: int = 0):
        self.channels = channels
        self.kernel = kernel
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.random_state = random_state

    def _build(self) -> TCNLite:
        rng = np.random.default_rng(self.random_state)
        return TCNLite(3, self.channels, self.t_in_, self.t_out_, rng, self.kernel)


class NaiveForecaster(_WindowRegressor):
    """Repeat the last observed V-GCT count for every future step."""

    def __init__(self, t_out: int = 12):
        self.t_out = t_out

    def fit(self, X, y=None):
        X = check_windows(X)
        self.n_segments_ = X.shape[2]
        return self

    def predict(self, X):
        check_is_fitted(self, "n_segments_")
        X = check_windows(X, n_segments=self.n_segments_)
        return np.repeat(X[:, 0, :, -1:], self.t_out, axis=-1)


class HistoricalAverageForecaster(_WindowRegressor):
    """Per-segment mean V-GCT for each time-of-day slot, from training targets.

    ``slots`` gives the time-of-day slot of every target step, ``[B, t_out]``
    (see :meth:`SampleSet.target_slots`).  Slots never seen in training fall
    back to the segment's overall mean.
    """

    def __init__(self, slots_per_day: int = 288):
        self.slots_per_day = slots_per_day

    def fit(self, X, y, slots=None):
        X, y = check_windows(X, y)
        slots = check_slots(slots, len(y), y.shape[2])
        n = y.shape[1]
        sums = np.zeros((n, self.slots_per_day))
        counts = np.zeros(self.slots_per_day)
        flat_slots = slots.reshape(-1)
        for j in range(n):
            sums[j] = np.bincount(flat_slots, weights=y[:, j, :].reshape(-1), minlength=self.slots_per_day)
        counts = np.bincount(flat_slots, minlength=self.slots_per_day)
        seg_mean = y.mean(axis=(0, 2))
        self.table_ = np.where(counts > 0, sums / np.maximum(counts, 1), seg_mean[:, None])
        self.n_segments_ = n
        return self

    def predict(self, X, slots=None):
        check_is_fitted(self, "table_")
        X = check_windows(X, n_segments=self.n_segments_)
        slots = np.asarray(slots)
        if slots.ndim != 2 or len(slots) != len(X):
            raise ConfigError(f"slots must be [B, t_out] for {len(X)} samples")
        return np.transpose(self.table_[:, slots], (1, 0, 2))


def baseline_predict(kind: str, train_set: SampleSet, test_set: SampleSet, val_set: SampleSet | None = None,
                     **params) -> np.ndarray:
    """Fit a baseline on ``train_set`` and predict ``test_set``."""
    if kind == "naive":
        return NaiveForecaster(test_set.targets.shape[-1]).fit(train_set.inputs).predict(test_set.inputs)
    if kind == "historical_average":
        est = HistoricalAverageForecaster().fit(train_set.inputs, train_set.targets, train_set.target_slots())
        return est.predict(test_set.inputs, test_set.target_slots())
    if kind == "tcn_lite":
        eval_set = None if val_set is None else (val_set.inputs, val_set.targets)
        est = TCNLiteRegressor(**params).fit(train_set.inputs, train_set.targets, eval_set=eval_set)
        return est.predict(test_set.inputs)
    raise ConfigError(f"unknown baseline {kind!r}")
