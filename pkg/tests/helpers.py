"""Shared test utilities: finite-difference gradient checks and digests."""

import hashlib

import numpy as np
import torch


def module_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def fd_gradient(fn, tensor: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Central finite differences of scalar fn w.r.t. every element of `tensor`."""
    grad = torch.zeros_like(tensor)
    flat = tensor.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        plus = float(fn())
        flat[i] = orig - h
        minus = float(fn())
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * h)
    return grad


def max_relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-6) -> float:
    """Elementwise |a - n| / max(|a|, |n|, floor), maximized."""
    a = analytic.detach().double()
    n = numeric.detach().double()
    denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, floor))
    return float(((a - n).abs() / denom).max())


def check_param_gradients(loss_fn, module: torch.nn.Module, tol: float, h: float = 1e-5) -> float:
    """Compare autograd parameter gradients of scalar loss_fn() against central differences.

    The module must be in double precision. Returns the worst relative error.
    """
    for p in module.parameters():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for p in module.parameters():
        analytic = p.grad if p.grad is not None else torch.zeros_like(p)
        with torch.no_grad():
            numeric = fd_gradient(lambda: loss_fn().detach(), p.data, h=h)
        worst = max(worst, max_relative_error(analytic, numeric))
    assert worst < tol, f"gradient mismatch: max relative error {worst:.3e} >= {tol:g}"
    return worst


def check_input_gradient(loss_fn, tensor: torch.Tensor, tol: float, h: float = 1e-5) -> float:
    """Same as check_param_gradients but w.r.t. one input tensor (requires_grad leaf)."""
    if tensor.grad is not None:
        tensor.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = tensor.grad if tensor.grad is not None else torch.zeros_like(tensor)
    with torch.no_grad():
        numeric = fd_gradient(lambda: loss_fn().detach(), tensor.data, h=h)
    worst = max_relative_error(analytic, numeric)
    assert worst < tol, f"gradient mismatch: max relative error {worst:.3e} >= {tol:g}"
    return worst


def random_unit(rng: np.random.Generator, dim: int) -> torch.Tensor:
    v = rng.standard_normal(dim)
    return torch.from_numpy((v / np.linalg.norm(v)).astype(np.float32))
