"""Mixture-of-experts traffic forecasting with time-enhanced attention."""

__version__ = "0.1.0"

from .data import (
    DatasetSplit,
    GraphSignalSeries,
    Scaler,
    WindowedSample,
    chronological_split,
    fit_scaler,
    make_windows,
    prepare_dataset,
)
from .io import (
    ScenarioTags,
    SyntheticConfig,
    generate_synthetic,
    load_bundle,
    load_csv,
    save_bundle,
)
from .model import AblationConfig, ForecastBundle, ModelConfig, TESTAM, count_parameters
from .training import (
    ScheduleConfig,
    TrainConfig,
    TrainingHistory,
    build_model,
    load_checkpoint,
    lr_at_step,
    save_checkpoint,
    train,
)
from .evaluation import HorizonReport, Metrics, RoutingReport, horizon_report, metrics, routing_report

__all__ = [
    "AblationConfig",
    "DatasetSplit",
    "ForecastBundle",
    "GraphSignalSeries",
    "HorizonReport",
    "Metrics",
    "ModelConfig",
    "RoutingReport",
    "Scaler",
    "ScenarioTags",
    "ScheduleConfig",
    "SyntheticConfig",
    "TESTAM",
    "TrainConfig",
    "TrainingHistory",
    "WindowedSample",
    "build_model",
    "chronological_split",
    "count_parameters",
    "fit_scaler",
    "generate_synthetic",
    "horizon_report",
    "load_bundle",
    "load_checkpoint",
    "load_csv",
    "lr_at_step",
    "make_windows",
    "metrics",
    "prepare_dataset",
    "routing_report",
    "save_bundle",
    "save_checkpoint",
    "train",
]
