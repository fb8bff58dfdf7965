"""Bipartite assignment of ground-truth instances to prediction slots."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import torch

from .losses import BRANCHES, CostCoeffs, match_loss
from .numeric import DTYPE, DomainError

# lower value wins a tie between equal branch totals
TIE_PRIORITY = {"F": 0, "V": 1, "T": 2}


@dataclass
class GroundTruthInstance:
    box: tuple  # (cx, cy, w, h), normalized
    attributes: dict = field(default_factory=dict)

    def __post_init__(self):
        self.box = tuple(float(v) for v in self.box)
        if len(self.box) != 4:
            raise DomainError("box needs four coordinates")
        cx, cy, w, h = self.box
        if not all(0.0 <= v <= 1.0 for v in self.box) or w * h <= 0:
            raise DomainError(f"invalid normalized box {self.box}")


def pairwise_cost(gt_boxes, prob, boxes, coeffs: CostCoeffs = CostCoeffs()) -> torch.Tensor:
    """(T, 4) ground truth against N slots -> (T, N) matching costs."""
    gt = torch.as_tensor(gt_boxes, dtype=DTYPE).reshape(-1, 4)
    prob = torch.as_tensor(prob, dtype=DTYPE)
    boxes = torch.as_tensor(boxes, dtype=DTYPE)
    if gt.shape[0] > prob.shape[0]:
        raise DomainError(f"{gt.shape[0]} instances but only {prob.shape[0]} slots")
    return match_loss(gt[:, None, :], prob[None, :], boxes[None, :, :], coeffs)


def hungarian(cost) -> np.ndarray:
    """Minimum-cost injective assignment of rows to columns.

    Shortest augmenting paths with dual potentials, O(T^2 N). Returns, for
    each row, the assigned column.
    """
    C = np.asarray(cost, dtype=np.float64)
    if C.ndim != 2:
        raise DomainError("cost must be a matrix")
    n, m = C.shape
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if n > m:
        raise DomainError("more rows than columns")
    if not np.isfinite(C).all():
        raise DomainError("cost entries must be finite")
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row (1-based) holding column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = C[i0 - 1] - u[i0] - v[1:]
            better = free[1:] & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free[1:], minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    out = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            out[p[j] - 1] = j - 1
    return out


def assignment_cost(cost, assignment) -> float:
    C = np.asarray(cost, dtype=np.float64)
    total = 0.0
    for row, col in enumerate(assignment):
        total += C[row, col]
    return total


@dataclass
class MatchPlan:
    """Per-branch optimal assignments and the one shared by every branch.

    ``costs`` has one row per instance and one column per branch (in the
    order of ``branches``), each entry the instance's matching cost in that
    branch under ``sigma_hat``.
    """

    sigma: dict
    totals: dict
    selected_branch: str
    sigma_hat: np.ndarray
    costs: np.ndarray
    branches: tuple = BRANCHES

    def column(self, branch: str) -> np.ndarray:
        return self.costs[:, self.branches.index(branch)]


def select_permutation(
    gt_boxes, dets: Mapping[str, tuple], coeffs: CostCoeffs = CostCoeffs()
) -> MatchPlan:
    """Pick the cheapest branch's assignment and re-score every branch under it.

    ``dets`` maps branch name to ``(prob (N,), boxes (N, 4))``. Each branch
    is matched on its own predictions; the branch with the lowest optimal
    total wins (ties go F, then V, then T).
    """
    branches = tuple(b for b in BRANCHES if b in dets)
    sizes = {dets[b][0].shape[0] for b in branches}
    if len(sizes) != 1:
        raise DomainError("branches must share the slot count")
    with torch.no_grad():
        cost = {
            b: pairwise_cost(gt_boxes, dets[b][0].detach(), dets[b][1].detach(), coeffs).numpy()
            for b in branches
        }
    sigma = {b: hungarian(cost[b]) for b in branches}
    totals = {b: assignment_cost(cost[b], sigma[b]) for b in branches}
    selected = min(branches, key=lambda b: (totals[b], TIE_PRIORITY[b]))
    sigma_hat = sigma[selected]
    rows = np.arange(len(sigma_hat))
    costs = np.stack([cost[b][rows, sigma_hat] for b in branches], axis=1) if len(rows) else (
        np.zeros((0, len(branches)))
    )
    return MatchPlan(sigma, totals, selected, sigma_hat, costs, branches)
