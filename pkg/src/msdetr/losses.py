"""Set-prediction loss stack.

Boxes are normalized ``(cx, cy, w, h)`` unless a function says otherwise.
All functions accept torch tensors and broadcast over leading dimensions,
so the same code serves the matcher (no grad) and training (with grad).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .numeric import DTYPE, DomainError

PROB_EPS = 1e-8
BRANCHES = ("V", "F", "T")
# fixed summation order for the total loss
SUM_ORDER = ("F", "V", "T")


def cxcywh_to_xyxy(b: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = b.unbind(-1)
    return torch.stack((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), dim=-1)


def xyxy_to_cxcywh(b: torch.Tensor) -> torch.Tensor:
    x1, y1, x2, y2 = b.unbind(-1)
    return torch.stack(((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1), dim=-1)


def focal_loss(prob, positive, alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """Binary focal loss of a pedestrian probability.

    ``positive`` may be a bool or a bool tensor broadcastable against ``prob``.
    """
    p = torch.as_tensor(prob, dtype=DTYPE).clamp(PROB_EPS, 1 - PROB_EPS)
    pos = -alpha * (1 - p) ** gamma * torch.log(p)
    neg = -(1 - alpha) * p**gamma * torch.log(1 - p)
    positive = torch.as_tensor(positive, dtype=torch.bool)
    return torch.where(positive, pos, neg)


def l1_box_loss(b, b_hat) -> torch.Tensor:
    return (torch.as_tensor(b, dtype=DTYPE) - torch.as_tensor(b_hat, dtype=DTYPE)).abs().sum(-1)


def _corners(b: torch.Tensor) -> torch.Tensor:
    b = torch.as_tensor(b, dtype=DTYPE)
    if (b[..., 2] <= 0).any() or (b[..., 3] <= 0).any():
        raise DomainError("GIoU needs boxes with positive area")
    return cxcywh_to_xyxy(b)


def _iou_parts(a: torch.Tensor, b: torch.Tensor):
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a + area_b - inter
    hull_wh = torch.maximum(a[..., 2:], b[..., 2:]) - torch.minimum(a[..., :2], b[..., :2])
    hull = hull_wh[..., 0] * hull_wh[..., 1]
    return inter, union, hull


def iou(a, b) -> torch.Tensor:
    inter, union, _ = _iou_parts(_corners(a), _corners(b))
    return inter / union


def giou(a, b) -> torch.Tensor:
    """Generalized IoU of broadcastable center-form boxes, in (-1, 1]."""
    inter, union, hull = _iou_parts(_corners(a), _corners(b))
    return inter / union - (hull - union) / hull


def pairwise_giou(a, b) -> torch.Tensor:
    """(T, 4) x (N, 4) -> (T, N)."""
    a = torch.as_tensor(a, dtype=DTYPE)
    b = torch.as_tensor(b, dtype=DTYPE)
    return giou(a[:, None, :], b[None, :, :])


@dataclass(frozen=True)
class CostCoeffs:
    """Weights of the classification, L1 and GIoU terms."""

    cls: float = 1.0
    l1: float = 1.0
    giou: float = 1.0
    alpha: float = 0.25
    gamma: float = 2.0


def match_loss(gt_box, prob, box, coeffs: CostCoeffs = CostCoeffs()) -> torch.Tensor:
    """Per-pair matching cost / matched loss; broadcasts over leading dims."""
    cls = focal_loss(prob, True, coeffs.alpha, coeffs.gamma)
    return (
        coeffs.cls * cls
        + coeffs.l1 * l1_box_loss(gt_box, box)
        + coeffs.giou * (1 - giou(gt_box, box))
    )


def dynamic_weights(costs, invert: bool = False) -> torch.Tensor:
    """Instance-wise branch weights from a (T, 3) cost matrix.

    Row ``j`` is a softmax of ``+c_j`` (or ``-c_j`` with ``invert``) across
    branches. The result is detached: the weights scale the losses but carry
    no gradient of their own.
    """
    c = torch.as_tensor(costs, dtype=DTYPE).detach()
    if c.numel() and not torch.isfinite(c).all():
        raise DomainError("dynamic weights need finite costs")
    if invert:
        c = -c
    if c.shape[0] == 0:
        return c.clone()
    return torch.softmax(c - c.max(dim=-1, keepdim=True).values, dim=-1)


def branch_loss(
    prob: torch.Tensor,
    boxes: torch.Tensor,
    gt_boxes: torch.Tensor,
    sigma_hat,
    lambdas=None,
    coeffs: CostCoeffs = CostCoeffs(),
) -> tuple[torch.Tensor, torch.Tensor]:
    """Loss of one branch under the shared assignment.

    prob: (N,), boxes: (N, 4), gt_boxes: (T, 4), sigma_hat: T slot indices,
    lambdas: (T,) or None for unit weights. Returns ``(matched, unmatched)``;
    the branch loss is their sum.
    """
    N = prob.shape[0]
    idx = torch.as_tensor(sigma_hat, dtype=torch.long).reshape(-1)
    T = idx.numel()
    matched_mask = torch.zeros(N, dtype=torch.bool)
    matched_mask[idx] = True
    unmatched = focal_loss(prob[~matched_mask], False, coeffs.alpha, coeffs.gamma).sum()
    if T == 0:
        return prob.new_zeros(()), unmatched
    lam = prob.new_ones(T) if lambdas is None else torch.as_tensor(lambdas, dtype=DTYPE).detach()
    per = match_loss(torch.as_tensor(gt_boxes, dtype=DTYPE), prob[idx], boxes[idx], coeffs)
    return (lam * per).sum(), unmatched


def total_loss(l_f, l_v, l_t):
    return l_f + l_v + l_t


@dataclass
class LossBreakdown:
    """Per-branch matched/unmatched terms, instance weights and the total."""

    matched: dict = field(default_factory=dict)
    unmatched: dict = field(default_factory=dict)
    lambdas: torch.Tensor | None = None
    total: torch.Tensor | None = None

    def branch(self, b: str) -> torch.Tensor:
        return self.matched[b] + self.unmatched[b]
