"""PM-MemNet: pattern-matching memory networks for road speed forecasting.

Extracts representative daily traffic patterns, matches input windows to
them by cosine k-NN, and forecasts multi-horizon speeds with a
memory-augmented graph-convolutional encoder/decoder.
"""

from .checkpoint import load_checkpoint, restore_model, save_checkpoint
from .forecaster import PMMemNetForecaster
from .graph import RoadGraph, build_adjacency, normalize_adjacency
from .model import ForecastModel, ModelConfig
from .patterns import (
    DailyProfiles,
    MatchResult,
    PatternExtractor,
    PatternSet,
    cluster_patterns,
    compute_daily_profiles,
    knn_match,
    sample_windows,
    zero_based,
)
from .synth import generate_synthetic
from .train import (
    MetricReport,
    SeriesDataset,
    evaluate,
    historical_average,
    mae_loss,
    make_windows,
    train_loop,
    unzscore,
    zscore,
)

__version__ = "0.1.0"

__all__ = [
    "DailyProfiles",
    "ForecastModel",
    "MatchResult",
    "MetricReport",
    "ModelConfig",
    "PMMemNetForecaster",
    "PatternExtractor",
    "PatternSet",
    "RoadGraph",
    "SeriesDataset",
    "build_adjacency",
    "cluster_patterns",
    "compute_daily_profiles",
    "evaluate",
    "generate_synthetic",
    "historical_average",
    "knn_match",
    "load_checkpoint",
    "mae_loss",
    "make_windows",
    "normalize_adjacency",
    "restore_model",
    "save_checkpoint",
    "sample_windows",
    "train_loop",
    "unzscore",
    "zero_based",
    "zscore",
]
