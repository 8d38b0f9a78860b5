"""Training objective: masked regression plus two routing classification losses.

Routing is trained as classification against pseudo labels derived from the
composite prediction's errors (detached, so no regression gradient reaches
the gate through them). Point-wise labels penalize the selected expert
wherever its error lands above the q-th quantile of the batch; node-wise
labels reward it where the node's mean error lands below the (1-q)-th
quantile.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .model import ForecastBundle

PROB_FLOOR = 1e-12


@dataclass
class LossWeights:
    reg: float = 1.0
    worst: float = 1.0
    best: float = 1.0


@dataclass
class RoutingLabels:
    """Pseudo-label tensors and the thresholds that produced them."""

    worst: torch.Tensor  # [B, T, N, E]
    best: torch.Tensor  # [B, N, E]
    worst_threshold: float
    best_threshold: float


def pointwise_error(y: torch.Tensor, y_hat: torch.Tensor):
    """Absolute error with missing targets zeroed.

    Returns (errors, mask) of y's shape; mask is False where y == 0, and
    those entries must be excluded from quantiles and averages.
    """
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    mask = y != 0.0
    return torch.where(mask, (y - y_hat).abs(), torch.zeros_like(y)), mask


def masked_mae(y: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over non-missing targets; 0 (with a warning) if none."""
    errors, mask = pointwise_error(y, y_hat)
    count = mask.sum()
    if count == 0:
        warnings.warn("masked_mae: every target masked, returning 0", stacklevel=2)
        return errors.sum() * 0.0
    return errors.sum() / count


def quantile_threshold(errors: torch.Tensor, q: float) -> torch.Tensor:
    """Linear-interpolation q-quantile of a flat error population."""
    if not 0.0 < q < 1.0:
        raise ValueError(f"q must be in (0, 1), got {q}")
    errors = errors.reshape(-1)
    if errors.numel() == 0:
        raise ValueError("empty error population")
    return torch.quantile(errors, q)


def _two_case_labels(
    correct: torch.Tensor, selected: torch.Tensor, n_experts: int
) -> torch.Tensor:
    """Pseudo labels: one-hot on the selected expert where routing counted as
    correct, otherwise zero there and 1/(E-1) on every other expert."""
    one_hot = F.one_hot(selected, n_experts).to(correct.dtype)
    spread = (1.0 - one_hot) / (n_experts - 1)
    return torch.where(correct.unsqueeze(-1).bool(), one_hot, spread)


def worst_route_labels(
    errors: torch.Tensor,
    selected: torch.Tensor,
    n_experts: int,
    q: float,
    mask: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Point-wise labels: routing is incorrect iff error strictly exceeds the
    q-quantile (ties count as correct, so a batch of equal errors, e.g. a
    perfectly fit one, is entirely correctly routed).

    errors/selected: [B, T, N]; returns (labels [B, T, N, E], threshold).
    The quantile population is the current batch's unmasked errors.
    """
    population = errors if mask is None else errors[mask]
    threshold = quantile_threshold(population, q)
    correct = (errors <= threshold).to(errors.dtype)
    return _two_case_labels(correct, selected, n_experts), threshold


def best_route_labels(
    node_errors: torch.Tensor,
    node_selected: torch.Tensor,
    n_experts: int,
    q: float,
    node_mask: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Node-wise labels: routing is best iff node error does not exceed the
    (1-q)-quantile (same tie rule as the point-wise labels).

    node_errors/node_selected: [B, N]; returns (labels [B, N, E], threshold).
    """
    population = node_errors if node_mask is None else node_errors[node_mask]
    threshold = quantile_threshold(population, 1.0 - q)
    correct = (node_errors <= threshold).to(node_errors.dtype)
    return _two_case_labels(correct, node_selected, n_experts), threshold


def routing_ce(
    p: torch.Tensor,
    labels: torch.Tensor,
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean over points of -(1/E) sum_e l_e log p_e, p clamped at 1e-12.

    p/labels: [..., E]; mask: [...] selects which points enter the mean.
    """
    n_experts = p.shape[-1]
    ce = -(labels * torch.log(p.clamp(min=PROB_FLOOR))).sum(dim=-1) / n_experts
    if mask is None:
        return ce.mean()
    count = mask.sum()
    if count == 0:
        warnings.warn("routing_ce: every point masked, returning 0", stacklevel=2)
        return ce.sum() * 0.0
    return (ce * mask.to(ce.dtype)).sum() / count


def node_average_errors(
    errors: torch.Tensor, mask: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-node mean of unmasked point errors: [B, T, N] -> ([B, N], valid)."""
    counts = mask.sum(dim=1)
    sums = (errors * mask.to(errors.dtype)).sum(dim=1)
    return sums / counts.clamp(min=1), counts > 0


def node_routing_probabilities(p: torch.Tensor) -> torch.Tensor:
    """Time-averaged routing distribution per node, renormalized: [B, N, E]."""
    node_p = p.mean(dim=1)
    return node_p / node_p.sum(dim=-1, keepdim=True)


def total_loss(
    bundle: ForecastBundle,
    y: torch.Tensor,
    q: float = 0.7,
    weights: LossWeights | None = None,
    worst_only: bool = False,
):
    """Combined objective and its components.

    Regression averages the masked MAE of every expert so unselected experts
    keep receiving gradient. Pseudo labels come from the composite
    prediction's errors, detached from the graph. Returns
    (total, components) where components maps names to float values.
    """
    weights = weights or LossWeights()
    n_experts = bundle.num_experts
    reg = sum(
        masked_mae(y, bundle.y_hat_per_expert[e]) for e in range(n_experts)
    ) / n_experts

    components = {"reg": float(reg.detach())}
    total = weights.reg * reg

    if bundle.p is not None and n_experts > 1:
        with torch.no_grad():
            errors, mask = pointwise_error(y, bundle.y_hat)
            errors = errors.squeeze(-1)
            mask = mask.squeeze(-1)
        if mask.any():
            worst_labels, worst_thr = worst_route_labels(
                errors, bundle.selected, n_experts, q, mask
            )
            l_worst = routing_ce(bundle.p, worst_labels, mask)

            node_errors, node_valid = node_average_errors(errors, mask)
            node_p = node_routing_probabilities(bundle.p)
            node_selected = node_p.argmax(dim=-1)
            best_labels, best_thr = best_route_labels(
                node_errors, node_selected, n_experts, q, node_valid
            )
            l_best = routing_ce(node_p, best_labels, node_valid)

            best_weight = 0.0 if worst_only else weights.best
            total = total + weights.worst * l_worst + best_weight * l_best
            components["worst"] = float(l_worst.detach())
            components["best"] = 0.0 if worst_only else float(l_best.detach())
            components["worst_threshold"] = float(worst_thr)
            components["best_threshold"] = float(best_thr)

    components["total"] = float(total.detach())
    return total, components
