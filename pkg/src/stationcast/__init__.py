"""Zero-shot microclimate forecasting at unmonitored weather stations.

Train a transformer encoder-decoder on data-rich source stations, then
transfer their encoder embeddings toward a never-observed target location
with a learned, location-aware transform, and decode a 24-hour forecast.
Ships with a spatially coherent synthetic-climate generator, classical
baselines, a two-phase trainer, and an evaluation harness.
"""

__version__ = "0.1.0"

from .autodiff import GradientTape, Tensor
from .baselines import ARModel, fit_ar, forecast_ar, last_value, moving_average, persistence
from .data import (
    Normalizer,
    StationMeta,
    StationSeries,
    WindowPair,
    ZeroShotSplit,
    fit_normalizer,
    load_station_metas,
    load_stations,
    make_windows,
    split_full_data,
    split_zero_shot,
)
from .model import ModelConfig, Seq2Seq, desk_config, load_checkpoint, save_checkpoint
from .synthetic import OUParams, SyntheticWorld, build_world, generate_series, sample_world
from .training import TrainConfig, TrainLog, train_backbone, train_transform
from .transform import SourceWindow, ZeroShotTransform, zero_shot_forecast

__all__ = [
    "__version__",
    "GradientTape",
    "Tensor",
    "ARModel",
    "fit_ar",
    "forecast_ar",
    "last_value",
    "moving_average",
    "persistence",
    "Normalizer",
    "StationMeta",
    "StationSeries",
    "WindowPair",
    "ZeroShotSplit",
    "fit_normalizer",
    "load_station_metas",
    "load_stations",
    "make_windows",
    "split_full_data",
    "split_zero_shot",
    "ModelConfig",
    "Seq2Seq",
    "desk_config",
    "load_checkpoint",
    "save_checkpoint",
    "OUParams",
    "SyntheticWorld",
    "build_world",
    "generate_series",
    "sample_world",
    "TrainConfig",
    "TrainLog",
    "train_backbone",
    "train_transform",
    "SourceWindow",
    "ZeroShotTransform",
    "zero_shot_forecast",
]
