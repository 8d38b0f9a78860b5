"""Temporal information embedding and input projection.

Time-of-day indices are encoded with a Time2Vec layer: one linear component
plus sinusoidal components with learnable frequency and phase. Because the
time code acts as a global position with known periodicity, no positional
encoding is used anywhere in the model; the table-lookup variant backs the
embedding ablation.
"""

from __future__ import annotations

import torch
import torch.nn as nn


def time2vec_scaled(v: torch.Tensor, w: torch.Tensor, phi: torch.Tensor) -> torch.Tensor:
    """Time2Vec of an already-scaled time value.

    v: [...] real tensor; w, phi: [h]. Returns [..., h] where component 0 is
    w[0]*v + phi[0] and components i>=1 are sin(w[i]*v + phi[i]).
    """
    raw = v.unsqueeze(-1) * w + phi
    return torch.cat([raw[..., :1], torch.sin(raw[..., 1:])], dim=-1)


class Time2Vec(nn.Module):
    """Learnable linear + periodic encoding of time-of-day indices.

    Integer indices tau in 0..steps_per_day-1 are scaled to v = tau/steps_per_day
    before encoding, keeping the frequencies well-conditioned.
    """

    def __init__(self, width: int, steps_per_day: int):
        super().__init__()
        if width < 2:
            raise ValueError("need width >= 2: one linear + >=1 periodic component")
        self.width = width
        self.steps_per_day = steps_per_day
        self.w = nn.Parameter(torch.empty(width))
        self.phi = nn.Parameter(torch.empty(width))
        nn.init.xavier_uniform_(self.w.view(1, -1))
        nn.init.zeros_(self.phi)

    def forward(self, tau: torch.Tensor) -> torch.Tensor:
        v = tau.to(self.w.dtype) / self.steps_per_day
        return time2vec_scaled(v, self.w, self.phi)


class TimeTable(nn.Module):
    """Plain learnable embedding per time-of-day index (no periodic structure)."""

    def __init__(self, width: int, steps_per_day: int):
        super().__init__()
        self.width = width
        self.steps_per_day = steps_per_day
        self.table = nn.Embedding(steps_per_day, width)

    def forward(self, tau: torch.Tensor) -> torch.Tensor:
        return self.table(tau)


class InputEmbedding(nn.Module):
    """Concatenate input features with the step's time code and project to d.

    The time code is computed once per step and shared by every node at that
    step.
    """

    def __init__(self, in_channels: int, time_encoder: nn.Module, d: int):
        super().__init__()
        self.time_encoder = time_encoder
        self.proj = nn.Linear(in_channels + time_encoder.width, d)

    def forward(self, x: torch.Tensor, tau: torch.Tensor) -> torch.Tensor:
        """x: [B, T, N, C]; tau: [B, T] integer indices -> [B, T, N, d]."""
        if x.dim() != 4:
            raise ValueError(f"x must be [B, T, N, C], got shape {tuple(x.shape)}")
        if tau.shape != x.shape[:2]:
            raise ValueError(
                f"tau shape {tuple(tau.shape)} does not match x batch/time "
                f"{tuple(x.shape[:2])}"
            )
        code = self.time_encoder(tau)  # [B, T, h]
        code = code.unsqueeze(2).expand(-1, -1, x.shape[2], -1)
        return self.proj(torch.cat([x, code], dim=-1))
