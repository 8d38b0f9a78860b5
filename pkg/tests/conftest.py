"""Shared test utilities: finite-difference gradients and tiny fixtures."""

from __future__ import annotations

import numpy as np
import torch


def finite_difference_grad(fn, param: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central-difference gradient of scalar fn() w.r.t. param, element-wise.

    Mutates param in place between evaluations; call with float64 tensors.
    """
    grad = torch.zeros_like(param)
    flat = param.reshape(-1)
    gflat = grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = float(fn())
            flat[i] = orig - eps
            down = float(fn())
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
    return grad


def assert_grads_close(analytic: torch.Tensor, numeric: torch.Tensor, rtol: float):
    """Relative comparison with a unit floor on the denominator."""
    analytic = analytic.detach().cpu().numpy()
    numeric = numeric.detach().cpu().numpy()
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    rel = np.abs(analytic - numeric) / denom
    assert rel.max() <= rtol, f"max relative gradient error {rel.max():.3e} > {rtol}"


def check_gradients(build_loss, params: list[torch.Tensor], rtol: float = 1e-3,
                    eps: float = 1e-5):
    """Compare autograd and central differences for each parameter tensor.

    build_loss() must return a fresh scalar loss using the given parameters.
    """
    loss = build_loss()
    grads = torch.autograd.grad(loss, params, allow_unused=False)
    for param, analytic in zip(params, grads):
        numeric = finite_difference_grad(lambda: build_loss(), param, eps=eps)
        assert_grads_close(analytic, numeric, rtol)
