"""Command-line entry point: generate / train / eval / routes.

Exit codes: 0 success, 2 usage or config error, 3 numeric failure
(training divergence). Every subcommand writes a provenance JSON capturing
the resolved config, seed, and tool version, sufficient to reproduce the
run. TESTAM_THREADS caps torch's intra-op worker threads.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import prepare_dataset
from .evaluation import horizon_report_from_arrays, collect_forecasts, routing_report
from .io import SyntheticConfig, generate_synthetic, load_bundle, load_csv, save_bundle
from .model import ModelConfig
from .training import (
    CheckpointError,
    DivergenceError,
    TrainConfig,
    build_model,
    load_checkpoint,
    save_checkpoint,
    train,
)


class UsageError(Exception):
    """Config or argument problem; maps to exit code 2."""


def _coerce(raw: str, current):
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise UsageError(f"cannot parse {raw!r} as a boolean")
    if isinstance(current, int) and not isinstance(current, bool):
        try:
            return int(raw)
        except ValueError:
            raise UsageError(f"cannot parse {raw!r} as an integer") from None
    if isinstance(current, float):
        try:
            return float(raw)
        except ValueError:
            raise UsageError(f"cannot parse {raw!r} as a number") from None
    return raw


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    """Apply repeatable --set dotted.key=value entries, type-checked."""
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise UsageError(f"unknown config key {key!r}")
            node = node[part]
        leaf = parts[-1]
        if leaf not in node:
            raise UsageError(f"unknown config key {key!r}")
        node[leaf] = _coerce(raw, node[leaf])
    return config


def _load_json(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"invalid JSON in {p}: {exc}") from exc


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_provenance(out_dir: Path, command: str, config: dict, seed, inputs: dict):
    doc = {
        "tool": "testam",
        "version": __version__,
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": inputs,
    }
    (out_dir / "provenance.json").write_text(json.dumps(doc, indent=2))


def _load_series(path: str):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"data file not found: {p}")
    if p.suffix == ".csv":
        return load_csv(p), None
    return load_bundle(p)


def _merge_with_defaults(defaults: dict, loaded: dict, label: str) -> dict:
    """Overlay a (possibly partial) config file onto schema defaults.

    Unknown keys in the file are rejected; nested dicts merge one level deep.
    """
    unknown = set(loaded) - set(defaults)
    if unknown:
        raise UsageError(f"unknown {label} config keys: {sorted(unknown)}")
    merged = dict(defaults)
    for key, value in loaded.items():
        if isinstance(defaults.get(key), dict):
            if not isinstance(value, dict):
                raise UsageError(f"config key {key!r} must be an object")
            sub_unknown = set(value) - set(defaults[key])
            if sub_unknown:
                raise UsageError(
                    f"unknown {label} config keys under {key!r}: {sorted(sub_unknown)}"
                )
            merged[key] = {**defaults[key], **value}
        else:
            merged[key] = value
    return merged


def cmd_generate(args) -> int:
    loaded = _load_json(args.config)
    defaults = dataclasses.asdict(SyntheticConfig())
    config = _merge_with_defaults(defaults, loaded, "synthetic")
    config = apply_overrides(config, args.set or [])
    if args.seed is not None:
        config["seed"] = args.seed
    try:
        cfg = SyntheticConfig(**config)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synthetic config: {exc}") from exc

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    series, adjacency, tags = generate_synthetic(cfg)
    save_bundle(series, tags, out_dir / "data.tstm")
    np.save(out_dir / "adjacency.npy", adjacency)
    _write_provenance(
        out_dir, "generate", dataclasses.asdict(cfg), cfg.seed, inputs={}
    )
    print(f"wrote {out_dir / 'data.tstm'} ({series.num_steps} steps, "
          f"{series.num_nodes} nodes)")
    return 0


def cmd_train(args) -> int:
    loaded = _load_json(args.config)
    defaults = TrainConfig().to_dict()
    config = _merge_with_defaults(defaults, loaded, "training")
    config = apply_overrides(config, args.set or [])
    try:
        cfg = TrainConfig.from_dict(config)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from exc
    if args.seed is not None:
        cfg.seed = args.seed

    series, _tags = _load_series(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    splits = prepare_dataset(series, cfg.t_in, cfg.t_out,
                             add_day_of_week=cfg.add_day_of_week)
    start_step = 0
    if args.resume:
        model_cfg = cfg.model_config(series.num_nodes, series.steps_per_day)
        model, extra = load_checkpoint(args.resume, expected=model_cfg)
        model.train()
        start_step = int(extra.get("step", 0))
    else:
        model = build_model(cfg, series.num_nodes, series.steps_per_day, splits.scaler)

    history = train(model, splits, cfg, start_step=start_step)
    arch_hash = model.cfg.hash()
    final_step = history.rows[-1]["step"] if history.rows else start_step
    save_checkpoint(
        model,
        out_dir / "checkpoint.pt",
        extra={
            "step": final_step,
            "best_epoch": history.best_epoch,
            "best_val_mae": history.best_val_mae,
            "train_config": cfg.to_dict(),
        },
    )
    history.write_csv(out_dir / "history.csv")
    snapshot = {
        "train_config": cfg.to_dict(),
        "model_config": model.cfg.to_dict(),
        "architecture_hash": arch_hash,
    }
    (out_dir / "config_snapshot.json").write_text(json.dumps(snapshot, indent=2))
    _write_provenance(
        out_dir, "train", cfg.to_dict(), cfg.seed,
        inputs={"data": str(args.data), "data_sha256": _sha256(Path(args.data))},
    )
    print(f"best val MAE {history.best_val_mae:.4f} at epoch {history.best_epoch}; "
          f"wrote {out_dir / 'checkpoint.pt'}")
    return 0


def _load_model_for_data(args):
    p = Path(args.checkpoint)
    if not p.exists():
        raise UsageError(f"checkpoint not found: {p}")
    model, extra = load_checkpoint(p)
    series, tags = _load_series(args.data)
    if model.cfg.n_nodes != series.num_nodes:
        raise UsageError(
            f"node-count mismatch: checkpoint expects {model.cfg.n_nodes} nodes, "
            f"dataset has {series.num_nodes}"
        )
    cfg = TrainConfig.from_dict(extra["train_config"]) if "train_config" in extra \
        else TrainConfig(t_in=model.cfg.t_in, t_out=model.cfg.t_out)
    splits = prepare_dataset(series, model.cfg.t_in, model.cfg.t_out,
                             add_day_of_week=model.cfg.in_channels == 3)
    return model, series, tags, splits, cfg


def cmd_eval(args) -> int:
    model, series, _tags, splits, cfg = _load_model_for_data(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    collected = collect_forecasts(model, splits.test)
    steps = list(range(1, model.cfg.t_out + 1))
    report = horizon_report_from_arrays(
        collected["y"], collected["y_hat"], steps, series.interval_minutes
    )
    report.write_csv(out_dir / "metrics.csv")
    _write_provenance(
        out_dir, "eval", {"checkpoint": str(args.checkpoint)}, cfg.seed,
        inputs={"data": str(args.data), "data_sha256": _sha256(Path(args.data))},
    )
    avg = report.by_horizon("average")
    print(f"test MAE {avg['mae']:.4f} RMSE {avg['rmse']:.4f} "
          f"MAPE {100 * avg['mape']:.2f}%")
    return 0


def _selection_plots(report, collected, out_dir: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    kinds = report.expert_kinds
    groups = dict(report.per_class or {})
    if report.per_event:
        groups.update(report.per_event)
    if groups:
        fig, ax = plt.subplots(figsize=(7, 4))
        labels = list(groups)
        x = np.arange(len(labels))
        width = 0.8 / len(kinds)
        for e, kind in enumerate(kinds):
            ax.bar(x + e * width, [groups[g][e] for g in labels], width,
                   label=f"{kind} [{e}]")
        ax.set_xticks(x + 0.4 - width / 2)
        ax.set_xticklabels(labels)
        ax.set_ylabel("selection share")
        ax.legend()
        fig.tight_layout()
        path = out_dir / "selection_by_group.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    fig, ax = plt.subplots(figsize=(7, 4))
    hours = sorted(report.per_hour, key=int)
    for e, kind in enumerate(kinds):
        ax.plot([int(h) for h in hours], [report.per_hour[h][e] for h in hours],
                marker="o", label=f"{kind} [{e}]")
    ax.set_xlabel("hour of day")
    ax.set_ylabel("selection share")
    ax.legend()
    fig.tight_layout()
    path = out_dir / "selection_by_hour.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    # First-step forecast overlay for the busiest-routed node.
    y = collected["y"][:, 0, :, 0]
    y_hat = collected["y_hat"][:, 0, :, 0]
    node = int(np.argmax(np.abs(y - y_hat).mean(axis=0)))
    fig, ax = plt.subplots(figsize=(9, 4))
    span = slice(0, min(len(y), 600))
    ax.plot(y[span, node], label="actual", lw=1.0)
    ax.plot(y_hat[span, node], label="predicted", lw=1.0)
    ax.set_xlabel("test sample")
    ax.set_ylabel("speed")
    ax.set_title(f"node {node}, first forecast step")
    ax.legend()
    fig.tight_layout()
    path = out_dir / "forecast_overlay.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)
    return written


def cmd_routes(args) -> int:
    model, series, tags, splits, cfg = _load_model_for_data(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = routing_report(model, splits.test, tags=tags, node_ids=series.node_ids)
    report.write_json(out_dir / "routing.json")
    collected = collect_forecasts(model, splits.test)
    plots = _selection_plots(report, collected, out_dir)
    _write_provenance(
        out_dir, "routes", {"checkpoint": str(args.checkpoint)}, cfg.seed,
        inputs={"data": str(args.data), "data_sha256": _sha256(Path(args.data))},
    )
    print(f"wrote {out_dir / 'routing.json'} and {len(plots)} plots")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="testam",
        description="Mixture-of-experts traffic forecasting toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=False, needs_checkpoint=False):
        if needs_config:
            p.add_argument("--config", required=True, help="JSON config path")
        if needs_checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint path")
        p.add_argument("--data", help="dataset path (.tstm bundle or .csv)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="config override (repeatable, dotted keys)")
        return p

    common(sub.add_parser("generate", help="generate a synthetic dataset"),
           needs_config=True)
    p_train = common(sub.add_parser("train", help="train a model"),
                     needs_config=True)
    p_train.add_argument("--resume", help="checkpoint to continue from")
    common(sub.add_parser("eval", help="evaluate a checkpoint"),
           needs_checkpoint=True)
    common(sub.add_parser("routes", help="routing report and plots"),
           needs_checkpoint=True)
    return parser


_HANDLERS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "routes": cmd_routes,
}


def main(argv=None) -> int:
    threads = os.environ.get("TESTAM_THREADS")
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"ignoring invalid TESTAM_THREADS={threads!r}", file=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command in ("train", "eval", "routes") and not args.data:
        parser.error(f"{args.command} requires --data")
    try:
        return _HANDLERS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
