"""Meta-node bank, learnable graph construction, and the gating memory query.

One m-by-e memory matrix is shared by two consumers: the adaptive expert,
which derives node embeddings from it to build a learnable adjacency, and
the gating network, which queries it with current traffic inputs. Training
signals therefore reach the bank along both routes.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class MetaNodeBank(nn.Module):
    """Shared memory matrix [m, e]."""

    def __init__(self, m: int, e: int):
        super().__init__()
        if m < 1:
            raise ValueError("need at least one memory item")
        self.m = m
        self.e = e
        self.memory = nn.Parameter(torch.empty(m, e))
        nn.init.xavier_uniform_(self.memory)


class NodeEmbeddings(nn.Module):
    """Hyper-network producing per-node embeddings from the memory bank.

    The bank is projected item-wise (M W_E, [m, d_node]) and mixed into N node
    rows by a learnable row-softmax matrix, so every node embedding is a
    convex combination of projected memory items.
    """

    def __init__(self, bank: MetaNodeBank, n_nodes: int, d_node: int):
        super().__init__()
        self.bank = bank
        self.proj = nn.Parameter(torch.empty(bank.e, d_node))
        self.mix_logits = nn.Parameter(torch.empty(n_nodes, bank.m))
        nn.init.xavier_uniform_(self.proj)
        nn.init.xavier_uniform_(self.mix_logits)

    def forward(self) -> torch.Tensor:
        mix = torch.softmax(self.mix_logits, dim=-1)
        return mix @ (self.bank.memory @ self.proj)


def adaptive_adjacency(node_emb: torch.Tensor) -> torch.Tensor:
    """Row-stochastic learnable adjacency: softmax(relu(E E^T)) over rows."""
    return torch.softmax(F.relu(node_emb @ node_emb.transpose(-2, -1)), dim=-1)


class GraphConvolution(nn.Module):
    """One-hop propagation H' = A H W_g applied independently per time step."""

    needs_adjacency = True

    def __init__(self, d: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d, d))
        nn.init.xavier_uniform_(self.weight)

    def forward(self, h: torch.Tensor, adjacency: torch.Tensor) -> torch.Tensor:
        if adjacency is None:
            raise ValueError("graph convolution requires an adjacency")
        # h: [B, T, N, d]; adjacency: [N, N].
        return torch.einsum("ij,btjd->btid", adjacency, h) @ self.weight


class MemoryQuery(nn.Module):
    """Similarity-weighted read of the bank from per-node input features.

    Q = x W_q + b_q; attention over memory items is softmax(Q M^T); the read
    is the attention-weighted sum of items.
    """

    def __init__(self, bank: MetaNodeBank, in_channels: int):
        super().__init__()
        self.bank = bank
        self.input_proj = nn.Linear(in_channels, bank.e)

    def forward(
        self, x: torch.Tensor, return_weights: bool = False
    ):
        """x: [..., C] -> read [..., e]."""
        q = self.input_proj(x)
        weights = torch.softmax(q @ self.bank.memory.t(), dim=-1)  # [..., m]
        read = weights @ self.bank.memory
        if return_weights:
            return read, weights
        return read
