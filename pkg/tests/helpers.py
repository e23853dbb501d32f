"""Shared test utilities: finite-difference oracle and a hook-based FLOP counter."""
import numpy as np
import torch
import torch.nn as nn


def central_difference(fn, x: torch.Tensor, step: float = 1e-4) -> torch.Tensor:
    """Gradient of scalar ``fn`` at ``x`` by central differences, one coordinate at a time."""
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for k in range(flat.numel()):
            orig = flat[k].item()
            flat[k] = orig + step
            up = float(fn(x))
            flat[k] = orig - step
            down = float(fn(x))
            flat[k] = orig
            gflat[k] = (up - down) / (2 * step)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    scale = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / scale


def fd_check(fn, x: torch.Tensor, step: float = 1e-4) -> float:
    x = x.detach().clone().double().requires_grad_(True)
    (analytic,) = torch.autograd.grad(fn(x), x)
    numeric = central_difference(fn, x.detach().clone(), step)
    return relative_error(analytic, numeric)


class FlopCounter:
    """Counts 2 * MACs of every Conv2d / Linear call on sample 0 of the batch."""

    def __init__(self, model: nn.Module):
        self.total = 0
        self.handles = [m.register_forward_hook(self._hook) for m in model.modules() if isinstance(m, (nn.Conv2d, nn.Linear))]

    def _hook(self, module, inputs, output):
        batch = output.shape[0]
        if isinstance(module, nn.Conv2d):
            kh, kw = module.kernel_size
            per_out = (module.in_channels // module.groups) * kh * kw
            self.total += 2 * per_out * output.numel() // batch
        else:
            self.total += 2 * module.in_features * module.out_features

    def close(self):
        for h in self.handles:
            h.remove()


def random_batch(config, batch=2, seed=0, dtype=torch.float32):
    rng = np.random.default_rng(seed)
    r = config.resolution
    image = torch.tensor(rng.uniform(0, 1, (batch, 3, r, r)), dtype=dtype)
    trimap = torch.tensor(rng.choice([0.0, 0.5, 1.0], (batch, 1, r, r)), dtype=dtype)
    return image, trimap


def fd_check_batched(fn, x: torch.Tensor, step: float = 1e-4, chunk: int = 512) -> float:
    """``fd_check`` for a per-sample map: ``fn`` takes ``(B, ...)`` and returns ``B`` scalars.

    All perturbed copies of the single sample ``x`` (shape ``(1, ...)``) are
    evaluated as batches, which is exact for modules without cross-sample
    interaction.
    """
    x = x.detach().clone().double()
    xg = x.clone().requires_grad_(True)
    (analytic,) = torch.autograd.grad(fn(xg).sum(), xg)
    n = x.numel()
    numeric = torch.zeros(n, dtype=x.dtype)
    with torch.no_grad():
        for lo in range(0, n, chunk):
            idx = torch.arange(lo, min(lo + chunk, n))
            delta = torch.zeros(len(idx), n, dtype=x.dtype)
            delta[torch.arange(len(idx)), idx] = step
            base = x.reshape(1, n)
            up = fn((base + delta).reshape(-1, *x.shape[1:]))
            down = fn((base - delta).reshape(-1, *x.shape[1:]))
            numeric[idx] = (up - down) / (2 * step)
    return relative_error(analytic, numeric.reshape(x.shape))
