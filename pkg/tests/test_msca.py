import numpy as np
import pytest
import torch

from msdetr.backbone import FeaturePyramid
from msdetr.msca import (
    MultiModalCrossAttention,
    QuerySet,
    SamplingSpec,
    fused_attention,
    joint_softmax,
    modal_attention,
    modal_softmax,
    point_dump_rows,
    reference_points,
    sampling_spec,
)
from msdetr.numeric import DTYPE, DomainError, bilinear_sample, grad_check, linear_map, module_fn

from oracles import dense_attention


def random_case(rng: np.random.Generator, d=None, H=None, L=None, K=None, Q=None):
    H = H or int(rng.choice([1, 2, 4]))
    d = d or H * int(rng.integers(1, 4))
    L = L or int(rng.integers(1, 4))
    K = K or int(rng.integers(1, 4))
    Q = Q or int(rng.integers(1, 5))
    h0, w0 = int(rng.integers(3, 9)), int(rng.integers(3, 9))
    shapes = [(h0, w0)]
    for _ in range(L - 1):
        h, w = shapes[-1]
        shapes.append(((h + 1) // 2, (w + 1) // 2))
    maps = [[rng.normal(size=(h, w, d)) for h, w in shapes] for _ in range(2)]
    block = MultiModalCrossAttention(d, H, L, K, 2)
    with torch.no_grad():
        for p in block.parameters():
            p.copy_(torch.tensor(rng.normal(scale=0.5, size=tuple(p.shape))))
    ce = torch.tensor(rng.normal(size=(1, Q, d)))
    pe = torch.tensor(rng.normal(size=(1, Q, d)))
    ref = torch.tensor(rng.uniform(0.05, 0.95, size=(1, Q, 2)))
    pyrs = [FeaturePyramid(m, [torch.tensor(x)[None] for x in maps[i]]) for i, m in enumerate("VT")]
    return block, maps, pyrs, ce, pe, ref


def oracle_inputs(block, spec):
    return dict(
        ref=spec.ref_points[0].detach().numpy(),
        offsets=spec.offsets[0].detach().numpy(),
        raw=spec.raw_weights[0].detach().numpy(),
        Wv=block.value_proj.weight.detach().numpy(),
        bv=block.value_proj.bias.detach().numpy(),
        Wo=block.out_proj.weight.detach().numpy(),
        bo=block.out_proj.bias.detach().numpy(),
    )


def test_fused_and_modal_match_dense_loop_oracle():
    rng = np.random.default_rng(20)
    for _ in range(100):
        block, maps, pyrs, ce, pe, ref = random_case(rng)
        spec = block.spec(ce, pe, ref)
        kw = oracle_inputs(block, spec)
        fused = fused_attention(spec, pyrs, block.value_proj, block.out_proj)[0].detach().numpy()
        np.testing.assert_allclose(fused, dense_attention(maps, mode="joint", **kw), atol=1e-6)
        for m in range(2):
            modal = modal_attention(spec, pyrs[m], m, block.value_proj, block.out_proj)[0].detach().numpy()
            np.testing.assert_allclose(modal, dense_attention(maps, mode="modal", modality=m, **kw), atol=1e-6)


def test_block_forward_equals_functional_paths():
    rng = np.random.default_rng(21)
    block, maps, pyrs, ce, pe, ref = random_case(rng, d=8, H=2, L=3, K=2, Q=4)
    spec, out = block(ce, pe, ref, pyrs)
    torch.testing.assert_close(out["F"], fused_attention(spec, pyrs, block.value_proj, block.out_proj),
                               rtol=0, atol=1e-12)
    torch.testing.assert_close(out["V"], modal_attention(spec, pyrs[0], 0, block.value_proj, block.out_proj),
                               rtol=0, atol=1e-12)
    torch.testing.assert_close(out["T"], modal_attention(spec, pyrs[1], 1, block.value_proj, block.out_proj),
                               rtol=0, atol=1e-12)


def test_weight_normalizations_over_random_passes():
    rng = np.random.default_rng(22)
    for _ in range(100):
        B, N, M, H, L, K = 2, int(rng.integers(1, 6)), 2, int(rng.integers(1, 5)), int(rng.integers(1, 5)), 4
        raw = torch.tensor(rng.normal(scale=3.0, size=(B, N, M, H, L, K)))
        joint = joint_softmax(raw)
        modal = modal_softmax(raw)
        assert torch.allclose(joint.sum(dim=(2, 4, 5)), torch.ones(B, N, H, dtype=DTYPE), atol=1e-6)
        assert torch.allclose(modal.sum(dim=(4, 5)), torch.ones(B, N, M, H, dtype=DTYPE), atol=1e-6)
        # modal weights are the joint weights renormalized within a modality
        ratio = joint / joint.sum(dim=(4, 5), keepdim=True)
        assert torch.allclose(ratio, modal, atol=1e-12)


def test_single_point_degenerate_case():
    rng = np.random.default_rng(23)
    d = 3
    fmap_v = rng.normal(size=(4, 5, d))
    fmap_t = rng.normal(size=(4, 5, d))
    pyrs = [FeaturePyramid(m, [torch.tensor(x)[None]]) for m, x in (("V", fmap_v), ("T", fmap_t))]
    ref = torch.tensor([[[0.37, 0.61]]], dtype=DTYPE)
    offsets = torch.zeros(1, 1, 2, 1, 1, 1, 2, dtype=DTYPE)
    raw = torch.tensor([0.0, -1e9], dtype=DTYPE).view(1, 1, 2, 1, 1, 1)
    spec = SamplingSpec(ref, offsets, raw, joint_softmax(raw), modal_softmax(raw))
    eye = linear_map(d, d)
    with torch.no_grad():
        eye.weight.copy_(torch.eye(d))
        eye.bias.zero_()
    out = fused_attention(spec, pyrs, eye, eye)[0, 0]
    expected = bilinear_sample(fmap_v, (0.37, 0.61))
    torch.testing.assert_close(out, expected, rtol=0, atol=1e-12)


def test_zero_offsets_sample_at_reference():
    rng = np.random.default_rng(24)
    block, maps, pyrs, ce, pe, ref = random_case(rng, d=4, H=1, L=1, K=1, Q=1)
    with torch.no_grad():
        block.linear2.weight.zero_()
        block.linear2.bias.zero_()
    spec = block.spec(ce, pe, ref)
    locs = list(point_dump_rows(spec, (32, 32), pyrs[0].shapes, [0]))
    for row in locs:
        assert row[5] == pytest.approx(ref[0, 0, 0].item() * 32)
        assert row[6] == pytest.approx(ref[0, 0, 1].item() * 32)


def test_reference_points_in_unit_square():
    lin = linear_map(8, 2)
    pe = torch.randn(50, 8, dtype=DTYPE) * 10
    ref = reference_points(pe, lin)
    assert ref.shape == (50, 2)
    assert ((ref > 0) & (ref < 1)).all()
    with pytest.raises(DomainError):
        reference_points(pe, linear_map(8, 3))


def test_sampling_spec_dimension_mismatch():
    lin2, lin3 = linear_map(8, 2 * 16), linear_map(8, 16)
    ce = torch.zeros(3, 8, dtype=DTYPE)
    spec = sampling_spec(ce, ce, torch.full((3, 2), 0.5, dtype=DTYPE), lin2, lin3, (2, 2, 2, 2))
    assert spec.offsets.shape == (1, 3, 2, 2, 2, 2, 2)
    with pytest.raises(DomainError):
        sampling_spec(ce, ce, torch.full((3, 2), 0.5, dtype=DTYPE), lin2, lin3, (2, 2, 2, 4))


def test_query_set_shape_check():
    z = torch.zeros(4, 8, dtype=DTYPE)
    assert QuerySet(z, z, z, z).content("T") is z
    with pytest.raises(DomainError):
        QuerySet(z, z, torch.zeros(3, 8, dtype=DTYPE), z)


def test_gradients_wrt_all_inputs():
    rng = np.random.default_rng(25)
    block, maps, pyrs, ce, pe, ref = random_case(rng, d=4, H=2, L=2, K=2, Q=2)
    readout = torch.tensor(rng.normal(size=(1, 2, 4)))

    def through(ce_, pe_, levels_v):
        spec = block.spec(ce_, pe_, ref)
        pv = FeaturePyramid("V", levels_v)
        return (fused_attention(spec, [pv, pyrs[1]], block.value_proj, block.out_proj) * readout).sum()

    n_ce = ce.numel()
    sizes = [lv.numel() for lv in pyrs[0].levels]
    shapes = [lv.shape for lv in pyrs[0].levels]
    x0 = torch.cat([ce.reshape(-1), pe.reshape(-1)] + [lv.reshape(-1) for lv in pyrs[0].levels])

    def f(vec):
        ce_ = vec[:n_ce].reshape(ce.shape)
        pe_ = vec[n_ce : 2 * n_ce].reshape(pe.shape)
        levels = [c.reshape(s) for c, s in zip(torch.split(vec[2 * n_ce :], sizes), shapes)]
        return through(ce_, pe_, levels)

    assert grad_check(f, x0) <= 1e-4

    g, p0 = module_fn(block, lambda call: (call(ce, pe, ref, pyrs, ("V", "F", "T"))[1]["T"] * readout).sum())
    assert grad_check(g, p0) <= 1e-4


def test_point_dump_rows_count_and_modal_sums():
    rng = np.random.default_rng(26)
    block, maps, pyrs, ce, pe, ref = random_case(rng, d=8, H=2, L=2, K=3, Q=5)
    spec = block.spec(ce, pe, ref)
    rows = list(point_dump_rows(spec, (64, 48), pyrs[0].shapes, [0, 3], weights="modal"))
    assert len(rows) == 2 * 2 * 2 * 2 * 3
    sums = {}
    for q, m, h, l, k, x, y, w, inside in rows:
        sums[(q, m, h)] = sums.get((q, m, h), 0.0) + w
        assert inside == (0 <= x <= 48 and 0 <= y <= 64)
    assert all(abs(s - 1) < 1e-9 for s in sums.values())
