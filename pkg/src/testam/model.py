"""The three-expert forecaster with memory-based top-1 routing.

Experts share hidden size, depth, and layer structure and differ only in the
spatial sublayer: per-node affine (identity), graph convolution over a
memory-derived learnable adjacency (adaptive), or unrestricted node
attention (attention). A gating network scores each expert's last hidden
state against a memory read of current traffic inputs; the top-1 expert's
prediction is taken point-wise as the final output.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

from .attention import (
    ExpertLayer,
    IdentitySpatial,
    SpatialAttention,
    TemporalTransfer,
    TimeEnhancedAttention,
)
from .data import Scaler
from .embedding import InputEmbedding, Time2Vec, TimeTable
from .graph import GraphConvolution, MemoryQuery, MetaNodeBank, NodeEmbeddings, adaptive_adjacency

EXPERT_KINDS = ("identity", "adaptive", "attention")
QUERY_WINDOWS = ("last", "mean")


@dataclass
class AblationConfig:
    """Architecture/training variants toggled for the ablation studies."""

    no_gating: bool = False
    ensemble: bool = False
    worst_only: bool = False
    replaced_identity: bool = False
    no_tim: bool = False
    no_time_enhanced: bool = False

    def validate(self) -> None:
        if self.no_gating and self.ensemble:
            raise ValueError("invalid ablation combination: no_gating and ensemble")

    def active(self) -> list[str]:
        return [k for k, v in asdict(self).items() if v]


@dataclass
class ModelConfig:
    n_nodes: int
    steps_per_day: int
    t_in: int = 12
    t_out: int = 12
    in_channels: int = 2
    d: int = 32
    e: int = 32
    m: int = 20
    n_layers: int = 3
    n_heads: int = 4
    h_ff: int = 128
    h_time: int = 32
    dropout: float = 0.1
    tea_mode: str = "paper"
    query_window: str = "last"
    share_time_encoder: bool = True
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self):
        if isinstance(self.ablation, dict):
            self.ablation = AblationConfig(**self.ablation)

    def validate(self) -> None:
        if self.d != self.e:
            raise ValueError(
                f"routing needs matching hidden and memory widths, d={self.d} != e={self.e}"
            )
        if self.d % self.n_heads != 0:
            raise ValueError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.query_window not in QUERY_WINDOWS:
            raise ValueError(f"query_window must be one of {QUERY_WINDOWS}")
        self.ablation.validate()
        if self.ablation.no_time_enhanced and self.t_in != self.t_out:
            raise ValueError(
                "no_time_enhanced requires t_in == t_out "
                f"(got {self.t_in} and {self.t_out})"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()


@dataclass
class ForecastBundle:
    """Per-expert predictions plus routing outcome for one forward pass.

    y_hat_per_expert: [E, B, T, N, 1] de-normalized predictions.
    z_per_expert:     [E, B, T, N, d] last hidden states.
    p:                [B, T, N, E] routing probabilities (None when gating is
                      disabled).
    selected:         [B, T, N] argmax expert index.
    y_hat:            [B, T, N, 1] composite prediction.
    """

    y_hat_per_expert: torch.Tensor
    z_per_expert: torch.Tensor
    p: torch.Tensor | None
    selected: torch.Tensor
    y_hat: torch.Tensor
    expert_kinds: tuple[str, ...]

    @property
    def num_experts(self) -> int:
        return self.y_hat_per_expert.shape[0]


class ExpertStack(nn.Module):
    """One expert: input embedding, stacked layers, and a scalar output head."""

    def __init__(self, kind: str, cfg: ModelConfig, bank: MetaNodeBank):
        super().__init__()
        if kind not in EXPERT_KINDS:
            raise ValueError(f"unknown expert kind {kind!r}")
        self.kind = kind
        encoder_cls = TimeTable if cfg.ablation.no_tim else Time2Vec
        self.time_encoder = encoder_cls(cfg.h_time, cfg.steps_per_day)
        if cfg.share_time_encoder:
            self.label_time_encoder = self.time_encoder
        else:
            self.label_time_encoder = encoder_cls(cfg.h_time, cfg.steps_per_day)
        self.embedding = InputEmbedding(cfg.in_channels, self.time_encoder, cfg.d)
        self.node_embeddings = (
            NodeEmbeddings(bank, cfg.n_nodes, cfg.e) if kind == "adaptive" else None
        )
        layers = []
        for _ in range(cfg.n_layers):
            if kind == "identity":
                spatial = IdentitySpatial(cfg.d)
            elif kind == "adaptive":
                spatial = GraphConvolution(cfg.d)
            else:
                spatial = SpatialAttention(cfg.d, cfg.n_heads)
            if cfg.ablation.no_time_enhanced:
                transfer = TemporalTransfer(cfg.d, cfg.n_heads)
            else:
                transfer = TimeEnhancedAttention(
                    cfg.d, cfg.n_heads, self.label_time_encoder, cfg.tea_mode
                )
            layers.append(
                ExpertLayer(cfg.d, cfg.n_heads, cfg.h_ff, spatial, transfer, cfg.dropout)
            )
        self.layers = nn.ModuleList(layers)
        self.head = nn.Linear(cfg.d, 1)

    def forward(
        self, x: torch.Tensor, tau_in: torch.Tensor, tau_out: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (normalized prediction [B, T_out, N, 1], last hidden [B, T_out, N, d])."""
        adjacency = None
        if self.node_embeddings is not None:
            adjacency = adaptive_adjacency(self.node_embeddings())
        h = self.embedding(x, tau_in)
        for layer in self.layers:
            h = layer(h, tau_out, adjacency)
        return self.head(h), h


class TESTAM(nn.Module):
    """Mixture of spatio-temporal experts with memory-queried top-1 routing."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.bank = MetaNodeBank(cfg.m, cfg.e)
        if cfg.ablation.no_gating:
            kinds = ("attention",)
        elif cfg.ablation.replaced_identity:
            kinds = ("adaptive", "adaptive", "attention")
        else:
            kinds = EXPERT_KINDS
        self.expert_kinds = kinds
        self.experts = nn.ModuleList(ExpertStack(k, cfg, self.bank) for k in kinds)
        self.gating = (
            None if cfg.ablation.no_gating else MemoryQuery(self.bank, cfg.in_channels)
        )
        self.register_buffer("scaler_mean", torch.tensor(0.0))
        self.register_buffer("scaler_std", torch.tensor(1.0))
        self._init_weights()

    def _init_weights(self) -> None:
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.xavier_uniform_(module.weight)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)
            elif isinstance(module, nn.Embedding):
                nn.init.xavier_uniform_(module.weight)

    def set_scaler(self, scaler: Scaler) -> None:
        self.scaler_mean.fill_(scaler.mean)
        self.scaler_std.fill_(scaler.std)

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def query_features(self, x: torch.Tensor) -> torch.Tensor:
        """Per-node gating query input: last observed step (or window mean)."""
        if self.cfg.query_window == "mean":
            return x.mean(dim=1)
        return x[:, -1]

    def routing_probabilities(
        self, z_all: torch.Tensor, memory_read: torch.Tensor
    ) -> torch.Tensor:
        """Softmax over experts of scaled dot products with the memory read.

        z_all: [E, B, T, N, d]; memory_read: [B, N, e] -> p [B, T, N, E].
        """
        scores = torch.einsum("ebtnd,bnd->ebtn", z_all, memory_read)
        scores = scores / math.sqrt(self.cfg.d)
        return torch.softmax(scores.permute(1, 2, 3, 0), dim=-1)

    def forward(
        self, x: torch.Tensor, tau_in: torch.Tensor, tau_out: torch.Tensor
    ) -> ForecastBundle:
        outputs = [expert(x, tau_in, tau_out) for expert in self.experts]
        y_norm = torch.stack([o[0] for o in outputs])  # [E, B, T, N, 1]
        z_all = torch.stack([o[1] for o in outputs])  # [E, B, T, N, d]
        y_all = y_norm * self.scaler_std + self.scaler_mean

        if self.gating is None:
            b, t, n = y_all.shape[1:4]
            selected = torch.zeros(b, t, n, dtype=torch.long, device=y_all.device)
            return ForecastBundle(
                y_hat_per_expert=y_all,
                z_per_expert=z_all,
                p=None,
                selected=selected,
                y_hat=y_all[0],
                expert_kinds=self.expert_kinds,
            )

        memory_read = self.gating(self.query_features(x))  # [B, N, e]
        p = self.routing_probabilities(z_all, memory_read)  # [B, T, N, E]
        selected = p.argmax(dim=-1)  # first index wins ties
        if self.cfg.ablation.ensemble:
            y_hat = torch.einsum("btne,ebtnc->btnc", p, y_all)
        else:
            idx = selected.unsqueeze(0).unsqueeze(-1)  # [1, B, T, N, 1]
            y_hat = torch.gather(y_all, 0, idx).squeeze(0)
        return ForecastBundle(
            y_hat_per_expert=y_all,
            z_per_expert=z_all,
            p=p,
            selected=selected,
            y_hat=y_hat,
            expert_kinds=self.expert_kinds,
        )


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
