"""Per-horizon accuracy metrics and routing-distribution reports.

All metrics mask targets equal to 0 (missing). MAPE is returned as a
fraction; report writers format it as a percentage with two decimals.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .io import ScenarioTags
from .model import TESTAM
from .training import iterate_batches


@dataclass(frozen=True)
class Metrics:
    mae: float | None
    rmse: float | None
    mape: float | None

    def as_row(self) -> dict:
        fmt = lambda v: None if v is None else float(v)
        return {"mae": fmt(self.mae), "rmse": fmt(self.rmse), "mape": fmt(self.mape)}


def metrics(y, y_hat) -> Metrics:
    """Masked MAE / RMSE / MAPE; all None when every target is missing."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {y_hat.shape}")
    mask = y != 0.0
    if not mask.any():
        return Metrics(None, None, None)
    err = y[mask] - y_hat[mask]
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err**2)))
    mape = float(np.mean(np.abs(err / y[mask])))
    return Metrics(mae, rmse, mape)


def horizon_steps(
    interval_minutes: int,
    horizon_minutes: tuple[int, ...] = (15, 30, 60),
    t_out: int | None = None,
) -> list[int]:
    """Map horizons in minutes to 1-based forecast step indices.

    Horizons that are not whole multiples of the interval or that exceed the
    forecast window are dropped.
    """
    steps = []
    for minutes in horizon_minutes:
        if minutes % interval_minutes != 0:
            continue
        step = minutes // interval_minutes
        if step < 1 or (t_out is not None and step > t_out):
            continue
        steps.append(step)
    return steps


@torch.no_grad()
def collect_forecasts(model: TESTAM, samples, batch_size: int = 64) -> dict:
    """Run the model over a sample list and gather everything reports need."""
    model.eval()
    ys, y_hats, selections, taus = [], [], [], []
    per_expert = []
    for x, y, tau_in, tau_out in iterate_batches(samples, batch_size):
        bundle = model(x, tau_in, tau_out)
        ys.append(y.numpy())
        y_hats.append(bundle.y_hat.numpy())
        selections.append(bundle.selected.numpy())
        per_expert.append(bundle.y_hat_per_expert.numpy())
        taus.append(tau_out.numpy())
    return {
        "y": np.concatenate(ys),  # [B, T, N, 1]
        "y_hat": np.concatenate(y_hats),
        "y_hat_per_expert": np.concatenate(per_expert, axis=1),  # [E, B, T, N, 1]
        "selected": np.concatenate(selections),  # [B, T, N]
        "tau_out": np.concatenate(taus),  # [B, T]
        "starts": np.array([s.start for s in samples]),
        "t_in": samples[0].x.shape[0],
        "gating_enabled": model.gating is not None,
        "expert_kinds": list(model.expert_kinds),
    }


@dataclass
class HorizonReport:
    rows: list[dict]  # one per requested step, plus the all-step average

    def write_csv(self, path: str | Path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["horizon", "step", "mae", "rmse", "mape_pct"]
            )
            writer.writeheader()
            for row in self.rows:
                out = dict(row)
                mape = out.pop("mape")
                out["mape_pct"] = None if mape is None else f"{100 * mape:.2f}"
                writer.writerow(out)

    def by_horizon(self, name: str) -> dict:
        for row in self.rows:
            if row["horizon"] == name:
                return row
        raise KeyError(name)


def horizon_report(
    model: TESTAM,
    samples,
    steps: list[int],
    interval_minutes: int | None = None,
    batch_size: int = 64,
) -> HorizonReport:
    """Metrics at each requested 1-based forecast step plus the all-step average."""
    collected = collect_forecasts(model, samples, batch_size)
    return horizon_report_from_arrays(
        collected["y"], collected["y_hat"], steps, interval_minutes
    )


def horizon_report_from_arrays(
    y: np.ndarray,
    y_hat: np.ndarray,
    steps: list[int],
    interval_minutes: int | None = None,
) -> HorizonReport:
    t_out = y.shape[1]
    rows = []
    for step in steps:
        if not 1 <= step <= t_out:
            raise ValueError(f"horizon step {step} outside 1..{t_out}")
        name = f"{step * interval_minutes}min" if interval_minutes else f"step{step}"
        m = metrics(y[:, step - 1], y_hat[:, step - 1])
        rows.append({"horizon": name, "step": step, **m.as_row()})
    m = metrics(y, y_hat)
    rows.append({"horizon": "average", "step": None, **m.as_row()})
    return HorizonReport(rows=rows)


def _share(selected: np.ndarray, n_experts: int) -> list[float]:
    counts = np.bincount(selected.reshape(-1), minlength=n_experts).astype(np.float64)
    total = counts.sum()
    return (counts / total).tolist() if total else [0.0] * n_experts


@dataclass
class RoutingReport:
    gating_enabled: bool
    expert_kinds: list[str]
    overall: list[float]
    per_node: dict[str, list[float]]
    per_hour: dict[str, list[float]]
    per_class: dict[str, list[float]] | None
    per_event: dict[str, list[float]] | None
    note: str | None = None

    def to_dict(self) -> dict:
        return {
            "gating_enabled": self.gating_enabled,
            "expert_kinds": self.expert_kinds,
            "overall": self.overall,
            "per_node": self.per_node,
            "per_hour": self.per_hour,
            "per_class": self.per_class,
            "per_event": self.per_event,
            "note": self.note,
        }

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def routing_report(
    model: TESTAM,
    samples,
    tags: ScenarioTags | None = None,
    node_ids: list[str] | None = None,
    batch_size: int = 64,
) -> RoutingReport:
    """Expert-selection shares grouped by node, hour of day, and scenario tag."""
    collected = collect_forecasts(model, samples, batch_size)
    selected = collected["selected"]  # [B, T, N]
    n_experts = len(collected["expert_kinds"])
    b, t_out, n = selected.shape
    if node_ids is None:
        node_ids = [f"n{i:03d}" for i in range(n)]

    per_node = {
        node_ids[i]: _share(selected[:, :, i], n_experts) for i in range(n)
    }
    hours = (collected["tau_out"] * 24) // model.cfg.steps_per_day  # [B, T]
    per_hour = {}
    for hour in np.unique(hours):
        sel = selected[hours == hour]  # [points, N]
        per_hour[str(int(hour))] = _share(sel, n_experts)

    per_class = None
    per_event = None
    if tags is not None:
        per_class = {}
        classes = np.array(tags.node_class)
        for label in sorted(set(tags.node_class)):
            cols = np.flatnonzero(classes == label)
            if cols.size:
                per_class[label] = _share(selected[:, :, cols], n_experts)
        # Align each forecast point with its raw series row to look up events.
        rows = collected["starts"][:, None] + collected["t_in"] + np.arange(t_out)
        event = tags.event_mask[rows]  # [B, T, N]
        per_event = {}
        if event.any():
            per_event["event"] = _share(selected[event], n_experts)
        if (~event).any():
            per_event["non_event"] = _share(selected[~event], n_experts)

    note = None if collected["gating_enabled"] else "gating disabled for this model"
    return RoutingReport(
        gating_enabled=collected["gating_enabled"],
        expert_kinds=collected["expert_kinds"],
        overall=_share(selected, n_experts),
        per_node=per_node,
        per_hour=per_hour,
        per_class=per_class,
        per_event=per_event,
        note=note,
    )
