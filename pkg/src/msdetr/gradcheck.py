"""Finite-difference verification of the differentiable building blocks.

Each check draws a small random configuration, wraps a scalar readout as a
function of a flat parameter vector and compares autograd with central
differences via :func:`msdetr.numeric.grad_check`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .backbone import FeaturePyramid
from .losses import CostCoeffs, branch_loss, dynamic_weights, total_loss
from .matching import select_permutation
from .msca import MultiModalCrossAttention, fused_attention, modal_attention
from .numeric import DTYPE, grad_check, module_fn

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    trial: int
    error: float

    @property
    def passed(self) -> bool:
        return self.error <= TOLERANCE


def random_pyramid(gen: torch.Generator, batch: int, shapes, channels: int, modality="V") -> FeaturePyramid:
    return FeaturePyramid(modality, [torch.randn(batch, h, w, channels, generator=gen, dtype=DTYPE)
                                     for h, w in shapes])


def random_attention(gen: torch.Generator, d=8, heads=2, levels=2, points=2, queries=3, batch=1):
    """A cross-attention block with random (non-initial) parameters plus random inputs."""
    torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=gen)))
    block = MultiModalCrossAttention(d, heads, levels, points, modalities=2)
    with torch.no_grad():
        for p in block.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=DTYPE) * 0.3)
    shapes = [(6, 5), (3, 3)][:levels]
    pyrs = [random_pyramid(gen, batch, shapes, d, m) for m in ("V", "T")]
    ce = torch.randn(batch, queries, d, generator=gen, dtype=DTYPE)
    pe = torch.randn(batch, queries, d, generator=gen, dtype=DTYPE)
    ref = torch.rand(batch, queries, 2, generator=gen, dtype=DTYPE) * 0.6 + 0.2
    readout = torch.randn(batch, queries, d, generator=gen, dtype=DTYPE)
    return block, pyrs, ce, pe, ref, readout


class _FusedReadout(torch.nn.Module):
    """Routes a block's parameters through :func:`fused_attention`."""

    def __init__(self, block: MultiModalCrossAttention):
        super().__init__()
        self.block = block

    def forward(self, ce, pe, ref, pyramids):
        spec = self.block.spec(ce, pe, ref)
        return fused_attention(spec, pyramids, self.block.value_proj, self.block.out_proj)


def check_fused_attention(gen: torch.Generator, h: float = 1e-5) -> float:
    """Readout of the fused output against every parameter of the block."""
    block, pyrs, ce, pe, ref, readout = random_attention(gen)
    f, x0 = module_fn(_FusedReadout(block), lambda call: (call(ce, pe, ref, pyrs) * readout).sum())
    return grad_check(f, x0, h)


def check_modal_attention(gen: torch.Generator, h: float = 1e-5) -> float:
    """Readout of the thermal uni-modal output w.r.t. the sampled map values."""
    block, pyrs, ce, pe, ref, readout = random_attention(gen)
    spec = block.spec(ce, pe, ref)
    spec = type(spec)(*(t.detach() for t in (spec.ref_points, spec.offsets, spec.raw_weights,
                                             spec.joint_weights, spec.modal_weights)))
    shapes = [lv.shape for lv in pyrs[1].levels]
    sizes = [lv.numel() for lv in pyrs[1].levels]
    x0 = torch.cat([lv.reshape(-1) for lv in pyrs[1].levels])

    def f(vec):
        levels = [c.reshape(s) for c, s in zip(torch.split(vec, sizes), shapes)]
        out = modal_attention(spec, FeaturePyramid("T", levels), 1, block.value_proj, block.out_proj)
        return (out * readout).sum()

    return grad_check(f, x0, h)


def _random_dets(gen, slots, branches=("V", "F", "T")):
    dets = {}
    for b in branches:
        logits = torch.randn(slots, generator=gen, dtype=DTYPE)
        box = torch.randn(slots, 4, generator=gen, dtype=DTYPE)
        dets[b] = (logits, box)
    return dets


def _boxes_from(raw):
    """Unconstrained (N, 4) -> valid normalized cx, cy, w, h."""
    return torch.cat([torch.sigmoid(raw[:, :2]), 0.05 + 0.4 * torch.sigmoid(raw[:, 2:])], dim=1)


def _random_gt(gen, T):
    c = torch.rand(T, 2, generator=gen, dtype=DTYPE) * 0.6 + 0.2
    wh = torch.rand(T, 2, generator=gen, dtype=DTYPE) * 0.3 + 0.05
    return torch.cat([c, wh], dim=1)


def check_branch_loss(gen: torch.Generator, h: float = 1e-5, slots: int = 6, T: int = 3) -> float:
    """Branch loss w.r.t. slot logits and box parameters under a fixed assignment."""
    gt = _random_gt(gen, T)
    logits, raw = _random_dets(gen, slots, ("F",))["F"]
    coeffs = CostCoeffs(1.0, 5.0, 2.0)
    plan = select_permutation(gt, {"F": (torch.sigmoid(logits), _boxes_from(raw))}, coeffs)
    lam = torch.rand(T, generator=gen, dtype=DTYPE)
    x0 = torch.cat([logits, raw.reshape(-1)])

    def f(vec):
        prob = torch.sigmoid(vec[:slots])
        boxes = _boxes_from(vec[slots:].reshape(slots, 4))
        m, u = branch_loss(prob, boxes, gt, plan.sigma_hat, lam, coeffs)
        return m + u

    return grad_check(f, x0, h)


def check_total_loss(gen: torch.Generator, h: float = 1e-5, slots: int = 6, T: int = 3) -> float:
    """Summed three-branch loss with the shared assignment and detached instance weights."""
    gt = _random_gt(gen, T)
    dets = _random_dets(gen, slots)
    coeffs = CostCoeffs(1.0, 5.0, 2.0)
    order = ("V", "F", "T")
    x0 = torch.cat([torch.cat([dets[b][0], dets[b][1].reshape(-1)]) for b in order])
    per = slots * 5

    def unpack(vec):
        out = {}
        for i, b in enumerate(order):
            chunk = vec[i * per : (i + 1) * per]
            out[b] = (torch.sigmoid(chunk[:slots]), _boxes_from(chunk[slots:].reshape(slots, 4)))
        return out

    plan = select_permutation(gt, unpack(x0), coeffs)
    lam = dynamic_weights(plan.costs)

    def f(vec):
        d = unpack(vec)
        parts = {}
        for b in order:
            m, u = branch_loss(*d[b], gt, plan.sigma_hat, lam[:, plan.branches.index(b)], coeffs)
            parts[b] = m + u
        return total_loss(parts["F"], parts["V"], parts["T"])

    return grad_check(f, x0, h)


CHECKS = {
    "fused_attention": check_fused_attention,
    "modal_attention": check_modal_attention,
    "branch_loss": check_branch_loss,
    "total_loss": check_total_loss,
}


def run_suite(seed: int = 0, trials: int = 20, names=None, h: float = 1e-5) -> list:
    gen = torch.Generator().manual_seed(seed)
    results = []
    for name in names or CHECKS:
        for trial in range(trials):
            results.append(CheckResult(name, trial, CHECKS[name](gen, h)))
    return results


def summarize(results) -> dict:
    by = {}
    for r in results:
        by.setdefault(r.name, []).append(r.error)
    return {k: (float(np.max(v)), all(e <= TOLERANCE for e in v)) for k, v in by.items()}
