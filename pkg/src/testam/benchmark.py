"""Reusable synthetic benchmark: train ablation variants, collect reports.

This backs both the ablation experiment script and the acceptance suite, so
the benchmark definition lives in exactly one place.
"""

from __future__ import annotations

from dataclasses import replace

from .data import prepare_dataset
from .evaluation import collect_forecasts, metrics, routing_report
from .io import SyntheticConfig, generate_synthetic
from .model import AblationConfig
from .training import TrainConfig, build_model, train

BENCHMARK_DATA = SyntheticConfig(
    n_nodes=10,
    steps_per_day=48,
    n_days=12,
    n_isolated=3,
    n_event_nodes=3,
    event_rate=1.0,
    noise_std=1.0,
    seed=0,
)

BENCHMARK_TRAIN = TrainConfig(
    d=16,
    e=16,
    m=8,
    n_layers=2,
    n_heads=4,
    h_ff=64,
    h_time=16,
    dropout=0.0,
    t_in=12,
    t_out=12,
    epochs=80,
    batch_size=32,
    seed=0,
    patience=100,
    t_warm=150,
    t_freq=1000,
    lr_max=3e-3,
)

ABLATION_VARIANTS = {
    "full": AblationConfig(),
    "no_gating": AblationConfig(no_gating=True),
    "ensemble": AblationConfig(ensemble=True),
    "worst_only": AblationConfig(worst_only=True),
    "replaced_identity": AblationConfig(replaced_identity=True),
}


def run_benchmark_variant(
    variant: str,
    data_seed: int,
    train_seed: int,
    data_cfg: SyntheticConfig = BENCHMARK_DATA,
    train_cfg: TrainConfig = BENCHMARK_TRAIN,
) -> dict:
    """Train one ablation variant on one benchmark seed; return metrics.

    The returned dict carries the average test MAE/RMSE plus, for gated
    variants, the routing report needed by the specialization analysis.
    """
    data_cfg = replace(data_cfg, seed=data_seed)
    series, _, tags = generate_synthetic(data_cfg)
    splits = prepare_dataset(series, train_cfg.t_in, train_cfg.t_out)
    cfg = replace(
        train_cfg, seed=train_seed, ablation=ABLATION_VARIANTS[variant]
    )
    model = build_model(cfg, series.num_nodes, series.steps_per_day, splits.scaler)
    history = train(model, splits, cfg)
    collected = collect_forecasts(model, splits.test)
    m = metrics(collected["y"], collected["y_hat"])
    result = {
        "variant": variant,
        "data_seed": data_seed,
        "train_seed": train_seed,
        "test_mae": m.mae,
        "test_rmse": m.rmse,
        "test_mape": m.mape,
        "best_val_mae": history.best_val_mae,
        "epochs_run": len(history.rows),
    }
    if model.gating is not None:
        report = routing_report(model, splits.test, tags=tags,
                                node_ids=series.node_ids)
        result["per_class"] = report.per_class
        result["per_event"] = report.per_event
        result["expert_kinds"] = report.expert_kinds
    return result
