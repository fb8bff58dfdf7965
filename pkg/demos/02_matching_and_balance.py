"""Shared assignment across branches and the per-instance branch weights.

Run with ``python3 demos/02_matching_and_balance.py``.
"""
import torch

from msdetr.losses import CostCoeffs, branch_loss, dynamic_weights
from msdetr.matching import hungarian, select_permutation
from msdetr.numeric import DTYPE

# %% The assignment solver on a 2x3 cost matrix.
print(hungarian([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0]]))  # [1, 0] beats the greedy [1, 2]

# %% Two instances, four slots, three branches.
gt = torch.tensor([[0.30, 0.50, 0.10, 0.30], [0.70, 0.45, 0.12, 0.35]], dtype=DTYPE)
slots = torch.tensor([
    [0.31, 0.50, 0.10, 0.30],
    [0.69, 0.46, 0.12, 0.34],
    [0.10, 0.10, 0.05, 0.05],
    [0.50, 0.90, 0.05, 0.05],
], dtype=DTYPE)
dets = {
    "V": (torch.tensor([0.9, 0.2, 0.1, 0.1], dtype=DTYPE), slots),  # sure of the first figure only
    "F": (torch.tensor([0.8, 0.7, 0.1, 0.1], dtype=DTYPE), slots),
    "T": (torch.tensor([0.3, 0.9, 0.1, 0.1], dtype=DTYPE), slots + 0.02),  # misaligned boxes
}
plan = select_permutation(gt, dets, CostCoeffs())
print("branch totals:", {b: round(float(v), 3) for b, v in plan.totals.items()})
print("selected:", plan.selected_branch, "assignment:", plan.sigma_hat)
print("per-instance costs (V, F, T):\n", plan.costs.round(3))

# %% Harder instances for a branch get more of that branch's weight.
lam = dynamic_weights(plan.costs)
print("lambda:\n", lam.numpy().round(3))
print("inverted:\n", dynamic_weights(plan.costs, invert=True).numpy().round(3))

# %% Branch losses under the shared assignment.
for i, b in enumerate(plan.branches):
    prob, boxes = dets[b]
    matched, unmatched = branch_loss(prob, boxes, gt, plan.sigma_hat, lam[:, i])
    print(f"L_{b}: matched {matched.item():.3f}  unmatched {unmatched.item():.3f}")
