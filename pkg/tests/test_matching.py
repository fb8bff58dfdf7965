import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from msdetr.losses import CostCoeffs
from msdetr.matching import (
    GroundTruthInstance,
    assignment_cost,
    hungarian,
    pairwise_cost,
    select_permutation,
)
from msdetr.numeric import DTYPE, DomainError

from oracles import brute_force_assignment, cxcywh_to_xyxy, focal_positive, giou_xyxy


def random_boxes(rng, n):
    c = rng.uniform(0.2, 0.8, size=(n, 2))
    wh = rng.uniform(0.05, 0.35, size=(n, 2))
    return np.concatenate([c, wh], axis=1)


def test_hungarian_equals_brute_force():
    rng = np.random.default_rng(30)
    for _ in range(1000):
        T = int(rng.integers(1, 7))
        N = int(rng.integers(T, 9))
        C = rng.normal(size=(T, N)) * rng.choice([0.1, 1.0, 100.0])
        a = hungarian(C)
        assert len(set(a.tolist())) == T
        assert assignment_cost(C, a) == brute_force_assignment(C)


def test_hungarian_examples():
    assert hungarian([[1, 2], [3, 0]]).tolist() == [0, 1]
    assert assignment_cost([[1, 2], [3, 0]], [0, 1]) == 1
    assert hungarian(np.ones((4, 4)) - np.eye(4)).tolist() == [0, 1, 2, 3]
    assert hungarian([[5.0, 2.0, 7.0, 1.5]]).tolist() == [3]
    assert hungarian(np.zeros((0, 3))).tolist() == []


def test_hungarian_rejects_bad_input():
    with pytest.raises(DomainError):
        hungarian(np.zeros((3, 2)))
    with pytest.raises(DomainError):
        hungarian([[np.nan, 1.0]])


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 5), st.integers(0, 3), st.integers(0, 2**32 - 1))
def test_hungarian_injective_and_no_worse_than_greedy(T, extra, seed):
    rng = np.random.default_rng(seed)
    C = rng.integers(-5, 6, size=(T, T + extra)).astype(float)
    a = hungarian(C)
    assert len(set(a.tolist())) == T
    assert assignment_cost(C, a) == brute_force_assignment(C)


def test_pairwise_cost_elementwise_oracle():
    rng = np.random.default_rng(31)
    coeffs = CostCoeffs(1.5, 5.0, 2.0)
    gt = random_boxes(rng, 3)
    boxes = random_boxes(rng, 5)
    prob = rng.uniform(0.01, 0.99, size=5)
    C = pairwise_cost(torch.tensor(gt), torch.tensor(prob), torch.tensor(boxes), coeffs).numpy()
    assert C.shape == (3, 5)
    for j in range(3):
        for n in range(5):
            l1 = np.abs(gt[j] - boxes[n]).sum()
            g = giou_xyxy(cxcywh_to_xyxy(gt[j]), cxcywh_to_xyxy(boxes[n]))
            expected = 1.5 * focal_positive(prob[n]) + 5.0 * l1 + 2.0 * (1 - g)
            assert C[j, n] == pytest.approx(expected, abs=1e-12)


def test_pairwise_cost_perfect_match_leaves_focal_term():
    box = torch.tensor([[0.5, 0.5, 0.2, 0.4]], dtype=DTYPE)
    p = 1 - 1e-6
    C = pairwise_cost(box, torch.tensor([p], dtype=DTYPE), box)
    assert C.item() == pytest.approx(focal_positive(p), abs=1e-15)


def test_pairwise_cost_more_instances_than_slots():
    with pytest.raises(DomainError):
        pairwise_cost(torch.rand(3, 4), torch.rand(2), torch.rand(2, 4))


def test_ground_truth_instance_validation():
    GroundTruthInstance((0.5, 0.5, 0.1, 0.2))
    with pytest.raises(DomainError):
        GroundTruthInstance((0.5, 0.5, 0.0, 0.2))
    with pytest.raises(DomainError):
        GroundTruthInstance((1.2, 0.5, 0.1, 0.2))


def make_dets(rng, N, branches=("V", "F", "T")):
    return {b: (torch.tensor(rng.uniform(0.05, 0.95, size=N)), torch.tensor(random_boxes(rng, N)))
            for b in branches}


def test_select_permutation_properties():
    rng = np.random.default_rng(32)
    for _ in range(200):
        T = int(rng.integers(0, 5))
        N = int(rng.integers(max(T, 1), 8))
        gt = torch.tensor(random_boxes(rng, T)).reshape(-1, 4)
        plan = select_permutation(gt, make_dets(rng, N))
        totals = plan.totals
        assert totals[plan.selected_branch] == min(totals.values())
        np.testing.assert_array_equal(plan.sigma_hat, plan.sigma[plan.selected_branch])
        assert len(set(plan.sigma_hat.tolist())) == T
        assert plan.costs.shape == (T, 3)
        assert np.isfinite(plan.costs).all()
        for b in plan.branches:
            assert plan.column(b).sum() >= totals[b] - 1e-12


def test_select_permutation_strict_winner_and_tie_break():
    rng = np.random.default_rng(33)
    gt = torch.tensor(random_boxes(rng, 2))
    good = (torch.tensor([0.9, 0.9, 0.1]), torch.cat([gt, torch.tensor([[0.2, 0.2, 0.1, 0.1]])]))
    bad = (torch.tensor([0.1, 0.1, 0.1]), torch.tensor(random_boxes(rng, 3)))
    assert select_permutation(gt, {"V": bad, "F": bad, "T": good}).selected_branch == "T"
    assert select_permutation(gt, {"V": good, "F": bad, "T": bad}).selected_branch == "V"
    assert select_permutation(gt, {"V": good, "F": good, "T": good}).selected_branch == "F"
    assert select_permutation(gt, {"V": good, "T": good}).selected_branch == "V"


def test_select_permutation_rescaling_keeps_choice():
    rng = np.random.default_rng(34)
    for _ in range(50):
        gt = torch.tensor(random_boxes(rng, 3))
        dets = make_dets(rng, 6)
        a = select_permutation(gt, dets, CostCoeffs(1, 1, 1))
        b = select_permutation(gt, dets, CostCoeffs(3, 3, 3))
        assert a.selected_branch == b.selected_branch
        np.testing.assert_array_equal(a.sigma_hat, b.sigma_hat)


def test_select_permutation_requires_equal_slots():
    rng = np.random.default_rng(35)
    dets = make_dets(rng, 4)
    dets["T"] = (torch.rand(5, dtype=DTYPE), torch.tensor(random_boxes(rng, 5)))
    with pytest.raises(DomainError):
        select_permutation(torch.tensor(random_boxes(rng, 2)), dets)
