"""Attention sublayers and the composite expert layer.

Every expert layer runs four sublayers in order: temporal self-attention,
a spatial-modeling sublayer (supplied per expert kind), time-enhanced
attention carrying hidden states from input steps to forecast steps, and a
point-wise feed-forward network. Each sublayer output is added to a skip
connection and layer-normalized (post-norm). The time-enhanced sublayer
keeps its skip only when source and target horizons have equal length.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

TEA_MODES = ("paper", "cross")


def _split_heads(x: torch.Tensor, n_heads: int) -> torch.Tensor:
    """[..., L, d] -> [..., K, L, d_k]."""
    *lead, length, d = x.shape
    x = x.view(*lead, length, n_heads, d // n_heads)
    return x.transpose(-3, -2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    """[..., K, L, d_k] -> [..., L, d]."""
    x = x.transpose(-3, -2).contiguous()
    *lead, length, n_heads, d_k = x.shape
    return x.view(*lead, length, n_heads * d_k)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention over the second-to-last axis.

    Inputs are [..., L, d] with arbitrary leading batch axes. Per head,
    scores are QK^T/sqrt(d_k), normalized over keys; head outputs are
    concatenated and projected.
    """

    def __init__(self, d: int, n_heads: int, key_in: int | None = None):
        super().__init__()
        if d % n_heads != 0:
            raise ValueError(f"d={d} not divisible by n_heads={n_heads}")
        self.d = d
        self.n_heads = n_heads
        self.d_k = d // n_heads
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(key_in if key_in is not None else d, d)
        self.v_proj = nn.Linear(d, d)
        self.o_proj = nn.Linear(d, d)

    def scores(self, q_in: torch.Tensor, k_in: torch.Tensor) -> torch.Tensor:
        q = _split_heads(self.q_proj(q_in), self.n_heads)
        k = _split_heads(self.k_proj(k_in), self.n_heads)
        return q @ k.transpose(-2, -1) / math.sqrt(self.d_k)

    def forward(
        self,
        q_in: torch.Tensor,
        k_in: torch.Tensor,
        v_in: torch.Tensor,
        return_weights: bool = False,
    ):
        scores = self.scores(q_in, k_in)
        attn = torch.softmax(scores, dim=-1)
        v = _split_heads(self.v_proj(v_in), self.n_heads)
        out = self.o_proj(_merge_heads(attn @ v))
        if return_weights:
            return out, attn
        return out


class TemporalAttention(nn.Module):
    """Self-attention across time steps, independently per node. No mask."""

    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.mha = MultiHeadAttention(d, n_heads)

    def forward(self, h: torch.Tensor, return_weights: bool = False):
        # [B, T, N, d] -> attend over T for each node.
        h_t = h.transpose(1, 2)  # [B, N, T, d]
        out = self.mha(h_t, h_t, h_t, return_weights=return_weights)
        if return_weights:
            return out[0].transpose(1, 2), out[1]
        return out.transpose(1, 2)


class SpatialAttention(nn.Module):
    """Self-attention across all nodes at each time step (no restrictions)."""

    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.mha = MultiHeadAttention(d, n_heads)

    def forward(self, h: torch.Tensor, return_weights: bool = False):
        # [B, T, N, d]: node axis is already second-to-last.
        return self.mha(h, h, h, return_weights=return_weights)


class TimeEnhancedAttention(nn.Module):
    """Attention from input-horizon hidden states to forecast-step time codes.

    Queries come from source hidden states, keys from the time encoding of
    target steps, values from source hidden states; output lives at the
    target steps. In "paper" mode each source's scores are normalized across
    targets and target j aggregates alpha[i, j]-weighted values over sources
    i; "cross" mode normalizes over sources instead, giving a convex
    combination at each target.
    """

    def __init__(
        self,
        d: int,
        n_heads: int,
        time_encoder: nn.Module,
        mode: str = "paper",
    ):
        super().__init__()
        if mode not in TEA_MODES:
            raise ValueError(f"mode must be one of {TEA_MODES}, got {mode!r}")
        self.mode = mode
        self.time_encoder = time_encoder
        self.mha = MultiHeadAttention(d, n_heads, key_in=time_encoder.width)

    def forward(
        self,
        h_src: torch.Tensor,
        tau_out: torch.Tensor,
        return_weights: bool = False,
    ):
        """h_src: [B, T_src, N, d]; tau_out: [B, T_out] -> [B, T_out, N, d]."""
        mha = self.mha
        h_t = h_src.transpose(1, 2)  # [B, N, T_src, d]
        keys = self.time_encoder(tau_out).unsqueeze(1)  # [B, 1, T_out, h]
        scores = mha.scores(h_t, keys)  # [B, N, K, T_src, T_out]
        dim = -1 if self.mode == "paper" else -2
        attn = torch.softmax(scores, dim=dim)
        v = _split_heads(mha.v_proj(h_t), mha.n_heads)  # [B, N, K, T_src, d_k]
        out = torch.einsum("...ij,...ic->...jc", attn, v)  # [B, N, K, T_out, d_k]
        out = mha.o_proj(_merge_heads(out)).transpose(1, 2)  # [B, T_out, N, d]
        if return_weights:
            return out, attn
        return out


class TemporalTransfer(nn.Module):
    """Drop-in for TimeEnhancedAttention that just re-runs temporal attention.

    Only valid when the input and output horizons have equal length; used by
    the ablation that removes time-enhanced attention.
    """

    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.attn = TemporalAttention(d, n_heads)

    def forward(self, h_src: torch.Tensor, tau_out: torch.Tensor) -> torch.Tensor:
        if tau_out.shape[1] != h_src.shape[1]:
            raise ValueError(
                "temporal-attention transfer requires equal input and output "
                f"horizons, got {h_src.shape[1]} -> {tau_out.shape[1]}"
            )
        return self.attn(h_src)


class FeedForward(nn.Module):
    """Point-wise two-layer network with ReLU."""

    def __init__(self, d: int, h_ff: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d, h_ff), nn.ReLU(), nn.Linear(h_ff, d))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.net(h)


class IdentitySpatial(nn.Module):
    """Per-node affine pass-through: no information crosses nodes."""

    def __init__(self, d: int):
        super().__init__()
        self.proj = nn.Linear(d, d)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.proj(h)


class ExpertLayer(nn.Module):
    """Temporal attention -> spatial sublayer -> time-enhanced attention -> FFN.

    The spatial module may require an adjacency (adaptive expert); it is
    passed through `forward`. Maps [B, T_src, N, d] to [B, T_out, N, d] where
    T_out is the length of tau_out.
    """

    def __init__(
        self,
        d: int,
        n_heads: int,
        h_ff: int,
        spatial: nn.Module,
        transfer: nn.Module,
        dropout: float = 0.1,
    ):
        super().__init__()
        self.temporal = TemporalAttention(d, n_heads)
        self.spatial = spatial
        self.transfer = transfer
        self.ffn = FeedForward(d, h_ff)
        self.norms = nn.ModuleList([nn.LayerNorm(d) for _ in range(4)])
        self.dropout = nn.Dropout(dropout)

    def forward(
        self,
        h: torch.Tensor,
        tau_out: torch.Tensor,
        adjacency: torch.Tensor | None = None,
    ) -> torch.Tensor:
        h = self.norms[0](h + self.dropout(self.temporal(h)))
        if getattr(self.spatial, "needs_adjacency", False):
            spatial_out = self.spatial(h, adjacency)
        else:
            spatial_out = self.spatial(h)
        h = self.norms[1](h + self.dropout(spatial_out))
        tea_out = self.dropout(self.transfer(h, tau_out))
        if tea_out.shape[1] == h.shape[1]:
            h = self.norms[2](h + tea_out)
        else:
            h = self.norms[2](tea_out)
        h = self.norms[3](h + self.dropout(self.ffn(h)))
        return h
