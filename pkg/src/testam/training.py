"""Optimizer setup, warmup/cosine-restart schedule, training loop, checkpoints.

The learning rate ramps linearly from lr_min to lr_max over the first t_warm
steps, then follows a cosine from lr_max down to lr_min with a restart every
t_freq steps. Training is fully deterministic for a fixed seed on one
machine: parameter init, shuffling, and batching all draw from seeded
generators and no nondeterministic reduction is used.
"""

from __future__ import annotations

import copy
import hashlib
import io
import csv
import json
import math
import random
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .data import DatasetSplit, Scaler, WindowedSample
from .losses import LossWeights, masked_mae, total_loss
from .model import AblationConfig, ForecastBundle, ModelConfig, TESTAM


class DivergenceError(RuntimeError):
    """Raised when the training loss stops being finite."""


class CheckpointError(RuntimeError):
    """Raised on unreadable, corrupted, or mismatched checkpoint files."""


@dataclass
class ScheduleConfig:
    lr_min: float = 1e-7
    lr_max: float = 3e-3
    t_warm: int = 4000
    t_freq: int = 4000

    def validate(self) -> None:
        if self.lr_min < 0 or self.lr_max < 0:
            raise ValueError("learning rates must be non-negative")
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must not exceed lr_max")
        if self.t_warm < 1 or self.t_freq < 1:
            raise ValueError("t_warm and t_freq must be >= 1")


def cosine_lr(t_cur: float, cfg: ScheduleConfig) -> float:
    """Cosine branch value at t_cur steps after the last restart."""
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (
        1.0 + math.cos(math.pi * t_cur / cfg.t_freq)
    )


def lr_at_step(step: int, cfg: ScheduleConfig) -> float:
    """Warmup for steps [0, t_warm), then cosine with restarts every t_freq."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < cfg.t_warm:
        return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * step / cfg.t_warm
    return cosine_lr((step - cfg.t_warm) % cfg.t_freq, cfg)


@dataclass
class TrainConfig:
    """Model dimensions plus every training knob, JSON round-trippable."""

    # architecture
    d: int = 32
    e: int = 32
    m: int = 20
    n_layers: int = 3
    n_heads: int = 4
    h_ff: int = 128
    h_time: int = 32
    dropout: float = 0.1
    t_in: int = 12
    t_out: int = 12
    tea_mode: str = "paper"
    query_window: str = "last"
    share_time_encoder: bool = True
    add_day_of_week: bool = False
    ablation: AblationConfig = field(default_factory=AblationConfig)
    # optimization
    epochs: int = 100
    batch_size: int = 16
    q: float = 0.7
    lambda_reg: float = 1.0
    lambda_worst: float = 1.0
    lambda_best: float = 1.0
    seed: int = 0
    patience: int = 15
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    clip_norm: float = 5.0
    lr_min: float = 1e-7
    lr_max: float = 3e-3
    t_warm: int = 4000
    t_freq: int = 4000

    def __post_init__(self):
        if isinstance(self.ablation, dict):
            self.ablation = AblationConfig(**self.ablation)

    def schedule(self) -> ScheduleConfig:
        cfg = ScheduleConfig(self.lr_min, self.lr_max, self.t_warm, self.t_freq)
        cfg.validate()
        return cfg

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_reg, self.lambda_worst, self.lambda_best)

    def model_config(self, n_nodes: int, steps_per_day: int) -> ModelConfig:
        return ModelConfig(
            n_nodes=n_nodes,
            steps_per_day=steps_per_day,
            t_in=self.t_in,
            t_out=self.t_out,
            in_channels=3 if self.add_day_of_week else 2,
            d=self.d,
            e=self.e,
            m=self.m,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            h_ff=self.h_ff,
            h_time=self.h_time,
            dropout=self.dropout,
            tea_mode=self.tea_mode,
            query_window=self.query_window,
            share_time_encoder=self.share_time_encoder,
            ablation=AblationConfig(**asdict(self.ablation)),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "ablation" in data and isinstance(data["ablation"], dict):
            ab_known = {f.name for f in fields(AblationConfig)}
            ab_unknown = set(data["ablation"]) - ab_known
            if ab_unknown:
                raise ValueError(f"unknown ablation keys: {sorted(ab_unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def build_model(
    cfg: TrainConfig,
    n_nodes: int,
    steps_per_day: int,
    scaler: Scaler | None = None,
) -> TESTAM:
    """Seeded model construction so identical configs give identical weights."""
    seed_everything(cfg.seed)
    model = TESTAM(cfg.model_config(n_nodes, steps_per_day))
    if scaler is not None:
        model.set_scaler(scaler)
    return model


def collate(samples: list[WindowedSample]):
    """Stack samples into (x [B,T,N,C], y [B,T,N,1], tau_in [B,T], tau_out [B,T])."""
    x = torch.from_numpy(np.stack([s.x for s in samples]))
    y = torch.from_numpy(np.stack([s.y for s in samples]))
    tau_in = torch.from_numpy(np.stack([s.tau_in for s in samples]))
    tau_out = torch.from_numpy(np.stack([s.tau_out for s in samples]))
    return x, y, tau_in, tau_out


def iterate_batches(samples, batch_size: int, generator: torch.Generator | None = None):
    """Minibatches in shuffled order (sequential when no generator given)."""
    if generator is None:
        order = range(len(samples))
    else:
        order = torch.randperm(len(samples), generator=generator).tolist()
    batch = []
    for idx in order:
        batch.append(samples[idx])
        if len(batch) == batch_size:
            yield collate(batch)
            batch = []
    if batch:
        yield collate(batch)


@torch.no_grad()
def validation_mae(model: TESTAM, samples, batch_size: int = 64) -> float:
    """Masked MAE of the composite prediction over a sample list."""
    model.eval()
    abs_sum = 0.0
    count = 0
    for x, y, tau_in, tau_out in iterate_batches(samples, batch_size):
        bundle = model(x, tau_in, tau_out)
        mask = y != 0.0
        abs_sum += float(((y - bundle.y_hat).abs() * mask).sum())
        count += int(mask.sum())
    model.train()
    return abs_sum / max(count, 1)


@dataclass
class TrainingHistory:
    rows: list[dict]
    best_epoch: int
    best_val_mae: float

    def write_csv(self, path: str | Path) -> None:
        if not self.rows:
            return
        keys = list(self.rows[0].keys())
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys)
            writer.writeheader()
            writer.writerows(self.rows)


def _selection_shares(bundle: ForecastBundle) -> np.ndarray:
    counts = torch.bincount(
        bundle.selected.reshape(-1), minlength=bundle.num_experts
    ).double()
    return (counts / counts.sum()).cpu().numpy()


def train(
    model: TESTAM,
    splits: DatasetSplit,
    cfg: TrainConfig,
    log=None,
    start_step: int = 0,
) -> TrainingHistory:
    """Adam training with the warmup/cosine schedule and early stopping.

    Keeps the best-on-validation weights and restores them before returning.
    Raises DivergenceError as soon as the loss leaves the finite range.
    start_step continues the schedule's step counter when resuming.
    """
    if not splits.train or not splits.val:
        raise ValueError("train and val splits must be non-empty")
    schedule = cfg.schedule()
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=schedule.lr_min,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.eps,
    )
    shuffle_rng = torch.Generator().manual_seed(cfg.seed)
    weights = cfg.loss_weights()
    n_experts = model.num_experts

    rows: list[dict] = []
    best_val = math.inf
    best_epoch = -1
    best_state = None
    bad_epochs = 0
    step = start_step

    model.train()
    for epoch in range(cfg.epochs):
        sums: dict[str, float] = {}
        share_sum = np.zeros(n_experts)
        n_batches = 0
        for x, y, tau_in, tau_out in iterate_batches(
            splits.train, cfg.batch_size, shuffle_rng
        ):
            lr = lr_at_step(step, schedule)
            for group in optimizer.param_groups:
                group["lr"] = lr
            bundle = model(x, tau_in, tau_out)
            loss, components = total_loss(
                bundle, y, q=cfg.q, weights=weights,
                worst_only=cfg.ablation.worst_only,
            )
            if not math.isfinite(components["total"]):
                raise DivergenceError(
                    f"non-finite loss {components['total']} at step {step}"
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.clip_norm > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
            optimizer.step()
            step += 1
            n_batches += 1
            for key, value in components.items():
                sums[key] = sums.get(key, 0.0) + value
            share_sum += _selection_shares(bundle)

        val_mae = validation_mae(model, splits.val, max(cfg.batch_size, 64))
        row = {
            "epoch": epoch,
            "step": step,
            "lr": lr_at_step(step - 1, schedule),
            "val_mae": val_mae,
        }
        for key in sorted(sums):
            row[f"train_{key}"] = sums[key] / n_batches
        for e in range(n_experts):
            row[f"share_{model.expert_kinds[e]}_{e}"] = share_sum[e] / n_batches
        rows.append(row)
        if log is not None:
            log(row)

        if val_mae < best_val:
            best_val = val_mae
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break

    if best_state is not None:
        model.load_state_dict(best_state)
    return TrainingHistory(rows=rows, best_epoch=best_epoch, best_val_mae=best_val)


def save_checkpoint(model: TESTAM, path: str | Path, extra: dict | None = None) -> None:
    """Persist parameters wrapped in a sha256-verified envelope.

    The inner payload (config, tensors, extras) is serialized to bytes and
    hashed so any corruption, including single bit flips in tensor data, is
    caught on load.
    """
    core = {
        "model_config": model.cfg.to_dict(),
        "state": model.state_dict(),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(core, buf)
    blob = buf.getvalue()
    envelope = {
        "blob": blob,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "config_hash": model.cfg.hash(),
    }
    torch.save(envelope, path)


def load_checkpoint(
    path: str | Path, expected: ModelConfig | None = None
) -> tuple[TESTAM, dict]:
    """Rebuild a model from a checkpoint; verifies hashes and optional config."""
    try:
        envelope = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    for key in ("blob", "sha256", "config_hash"):
        if key not in envelope:
            raise CheckpointError(f"checkpoint {path} missing field {key!r}")
    if hashlib.sha256(envelope["blob"]).hexdigest() != envelope["sha256"]:
        raise CheckpointError("payload hash mismatch: checkpoint corrupted")
    payload = torch.load(io.BytesIO(envelope["blob"]), weights_only=False)
    cfg = ModelConfig.from_dict(payload["model_config"])
    if cfg.hash() != envelope["config_hash"]:
        raise CheckpointError("config hash mismatch: checkpoint corrupted")
    if expected is not None:
        for f in fields(ModelConfig):
            got = getattr(cfg, f.name)
            want = getattr(expected, f.name)
            if got != want:
                raise CheckpointError(
                    f"config mismatch on field {f.name!r}: checkpoint has {got}, "
                    f"expected {want}"
                )
    model = TESTAM(cfg)
    model.load_state_dict(payload["state"])
    model.eval()
    return model, payload.get("extra", {})
