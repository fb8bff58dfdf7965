"""Differentiable numeric substrate.

Everything runs on ``torch`` tensors in double precision; reverse-mode
gradients come from autograd's recorded graph. This module adds the few
primitives the detector needs on top of that: a zero-padded bilinear
sampler with texel-centre addressing, a stable softmax and a central
finite-difference gradient checker.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import torch
from torch import nn
from torch.nn import functional as F

DTYPE = torch.float64


class DomainError(ValueError):
    """Raised when an operation receives inputs outside its domain."""


def as_tensor(x, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(x, dtype=DTYPE)
    if requires_grad:
        t = t.clone().requires_grad_(True)
    return t


def linear_map(in_dim: int, out_dim: int, bias: bool = True) -> nn.Linear:
    """A double-precision affine map ``x -> W x + b`` with ``W`` of shape (out, in)."""
    return nn.Linear(in_dim, out_dim, bias=bias, dtype=DTYPE)


def softmax(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    v = torch.as_tensor(v, dtype=DTYPE)
    if v.numel() == 0 or v.shape[dim] == 0:
        raise DomainError("softmax of an empty vector")
    shifted = v - v.max(dim=dim, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def sample_grid(fmap: torch.Tensor, loc: torch.Tensor) -> torch.Tensor:
    """Bilinearly sample a batch of channel-last maps.

    fmap: (B, H, W, C); loc: (B, ..., 2) normalized (x, y). Returns (B, ..., C).

    Normalized ``u`` addresses pixel coordinate ``u * W - 0.5`` so texel
    centres sit at ``(i + 0.5) / W``. Neighbours outside the map contribute
    zero, and locations outside the unit square return the zero vector.
    """
    if not torch.isfinite(loc).all():
        raise DomainError("non-finite sampling location")
    B, H, W, C = fmap.shape
    if H <= 0 or W <= 0:
        raise DomainError("feature map must have positive extent")
    lead = loc.shape[1:-1]
    loc = loc.reshape(B, -1, 1, 2)
    # align_corners=False addresses pixel u * W - 0.5, padding_mode="zeros" drops outside neighbours
    out = F.grid_sample(fmap.permute(0, 3, 1, 2), 2 * loc - 1, mode="bilinear",
                        padding_mode="zeros", align_corners=False)
    inside = ((loc >= 0) & (loc <= 1)).all(dim=-1)  # (B, P, 1)
    out = out[..., 0].transpose(1, 2) * inside.to(fmap.dtype)
    return out.reshape(B, *lead, C)


def bilinear_sample(fmap: torch.Tensor, loc) -> torch.Tensor:
    """Sample one (H, W, C) map at a single normalized location; returns a C-vector."""
    fmap = torch.as_tensor(fmap, dtype=DTYPE)
    if fmap.dim() == 2:
        fmap = fmap.unsqueeze(-1)
    loc = torch.as_tensor(loc, dtype=DTYPE)
    return sample_grid(fmap.unsqueeze(0), loc.reshape(1, 1, 2))[0, 0]


def grad_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    point,
    h: float = 1e-5,
    indices: Sequence[int] | None = None,
) -> float:
    """Max relative error between the autograd gradient and central differences.

    The error for coordinate ``i`` is ``|g_a - g_fd| / max(1, |g_fd|)``. With
    ``indices`` only that subset of coordinates is probed.
    """
    if not 1e-7 <= h <= 1e-3:
        raise DomainError(f"step {h} outside [1e-7, 1e-3]")
    x = torch.as_tensor(point, dtype=DTYPE).detach().clone().reshape(-1)
    xg = x.clone().requires_grad_(True)
    value = f(xg)
    if not torch.isfinite(value).all():
        raise DomainError("f(point) is not finite")
    (analytic,) = torch.autograd.grad(value, xg, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x)
    coords = range(x.numel()) if indices is None else indices
    worst = 0.0
    with torch.no_grad():
        for i in coords:
            xp = x.clone()
            xp[i] += h
            xm = x.clone()
            xm[i] -= h
            fd = (f(xp).item() - f(xm).item()) / (2 * h)
            err = abs(analytic[i].item() - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst


def module_fn(
    module: nn.Module,
    readout: Callable[..., torch.Tensor],
    names: Sequence[str] | None = None,
) -> tuple[Callable[[torch.Tensor], torch.Tensor], torch.Tensor]:
    """Expose a scalar readout of ``module`` as a function of a flat parameter vector.

    ``readout(call)`` receives a callable with the module's forward signature
    that runs with the substituted parameters. Returns ``(f, x0)`` ready for
    :func:`grad_check`.
    """
    named = dict(module.named_parameters())
    names = list(named) if names is None else list(names)
    shapes = [named[n].shape for n in names]
    sizes = [named[n].numel() for n in names]
    x0 = torch.cat([named[n].detach().reshape(-1) for n in names])

    def f(vec: torch.Tensor) -> torch.Tensor:
        chunks = torch.split(vec, sizes)
        sub = {n: c.reshape(s) for n, c, s in zip(names, chunks, shapes)}

        def call(*args, **kwargs):
            return torch.func.functional_call(module, sub, args, kwargs, strict=False)

        return readout(call)

    return f, x0


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    x = x.clamp(min=0.0, max=1.0)
    return torch.log(x.clamp(min=eps) / (1 - x).clamp(min=eps))


def logit(p: float) -> float:
    return math.log(p / (1 - p))
