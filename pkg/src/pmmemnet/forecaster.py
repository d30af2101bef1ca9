"""sklearn-style facade over model construction, training and forecasting."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .graph import RoadGraph
from .model import ForecastModel, ModelConfig
from .patterns import PatternExtractor, PatternSet
from .train import SeriesDataset, TrainResult, evaluate, train_loop
from .validation import as_float_matrix


class PMMemNetForecaster(BaseEstimator):
    """Train and apply the pattern-matching memory forecaster.

    Hyperparameters mirror :class:`ModelConfig` plus the training loop
    knobs. ``fit`` consumes a :class:`SeriesDataset`, the road graph and a
    fitted pattern bank (a :class:`PatternSet` or fitted
    :class:`PatternExtractor`); ``predict`` maps one raw speed window to a
    multi-horizon forecast in speed units.
    """

    def __init__(
        self,
        window_len=18,
        horizon=18,
        hidden_dim=128,
        num_layers=3,
        num_neighbors=3,
        num_heads=4,
        node_embed_dim=10,
        simple_mem=False,
        epochs=100,
        batch_size=16,
        lr=0.001,
        patience=15,
        random_state=0,
    ):
        self.window_len = window_len
        self.horizon = horizon
        self.hidden_dim = hidden_dim
        self.num_layers = num_layers
        self.num_neighbors = num_neighbors
        self.num_heads = num_heads
        self.node_embed_dim = node_embed_dim
        self.simple_mem = simple_mem
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.patience = patience
        self.random_state = random_state

    def _config(self, num_patterns: int) -> ModelConfig:
        return ModelConfig(
            window_len=self.window_len,
            horizon=self.horizon,
            hidden_dim=self.hidden_dim,
            num_layers=self.num_layers,
            num_neighbors=self.num_neighbors,
            num_patterns=num_patterns,
            num_heads=self.num_heads,
            node_embed_dim=self.node_embed_dim,
            seed=self.random_state,
            simple_mem=self.simple_mem,
        )

    def fit(self, dataset: SeriesDataset, graph: RoadGraph, patterns, log=None):
        """Train on the dataset's training split with validation early stopping."""
        if isinstance(patterns, PatternExtractor):
            patterns = patterns.patterns_
        if not isinstance(patterns, PatternSet):
            raise TypeError("patterns must be a PatternSet or a fitted PatternExtractor")
        self.model_ = ForecastModel(self._config(patterns.count), graph, patterns)
        result: TrainResult = train_loop(
            self.model_,
            dataset,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            patience=self.patience,
            seed=self.random_state,
            log=log,
        )
        self.history_ = result.history
        self.best_val_mae_ = result.best_val_mae
        self.scaler_ = (dataset.mean, dataset.std)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("PMMemNetForecaster is not fitted; call fit first")

    def predict(self, window_raw: np.ndarray, slots: np.ndarray) -> np.ndarray:
        """Forecast (num_nodes, horizon) speeds from one raw window (num_nodes, T')."""
        self._check_fitted()
        window_raw = as_float_matrix(window_raw, "window", allow_nan=True)
        mean, std = self.scaler_
        return self.model_.forecast(window_raw, slots, mean, std)

    def score_report(self, dataset: SeriesDataset, split: str = "test"):
        """Per-horizon MAE/MAPE/RMSE report on a split (speed units)."""
        self._check_fitted()
        return evaluate(self.model_, dataset, split)
