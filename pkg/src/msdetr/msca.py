"""Multi-modal cross-attention with loosely coupled fusion.

The fusion-branch content embedding predicts, for every modality, head,
level and point, a sampling offset around the query's reference point and
a raw attention weight. Modalities are combined only when the sampled
values are summed: the fused output normalizes weights jointly over
(modality, level, point), while each uni-modal output renormalizes its own
modality's weights over (level, point).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .deform import aggregate, init_sampling_linears, project_heads
from .numeric import DTYPE, DomainError, linear_map, softmax

MODALITIES = ("V", "T")


@dataclass
class QuerySet:
    pe: torch.Tensor  # (N, d) shared positional encodings
    ce_v: torch.Tensor
    ce_f: torch.Tensor
    ce_t: torch.Tensor

    def __post_init__(self):
        shapes = {tuple(t.shape) for t in (self.pe, self.ce_v, self.ce_f, self.ce_t)}
        if len(shapes) != 1:
            raise DomainError(f"query blocks disagree in shape: {shapes}")

    def content(self, branch: str) -> torch.Tensor:
        return {"V": self.ce_v, "F": self.ce_f, "T": self.ce_t}[branch]


@dataclass
class SamplingSpec:
    """Per-query sampling pattern. Leading dims are (B, N)."""

    ref_points: torch.Tensor  # (B, N, 2)
    offsets: torch.Tensor  # (B, N, M, H, L, K, 2), level texel units
    raw_weights: torch.Tensor  # (B, N, M, H, L, K)
    joint_weights: torch.Tensor  # softmax over (M, L, K)
    modal_weights: torch.Tensor  # softmax over (L, K) within each modality

    @property
    def dims(self) -> tuple:
        return tuple(self.raw_weights.shape[2:])  # (M, H, L, K)


def reference_points(pe: torch.Tensor, linear1: nn.Linear) -> torch.Tensor:
    """Logistic-squashed ``linear1(pe)``: one normalized (x, y) per query."""
    if linear1.out_features != 2:
        raise DomainError("reference-point map must output 2 values")
    return torch.sigmoid(linear1(pe))


def joint_softmax(raw: torch.Tensor) -> torch.Tensor:
    B, N, M, H, L, K = raw.shape
    flat = raw.permute(0, 1, 3, 2, 4, 5).reshape(B, N, H, M * L * K)
    return softmax(flat).reshape(B, N, H, M, L, K).permute(0, 1, 3, 2, 4, 5)


def modal_softmax(raw: torch.Tensor) -> torch.Tensor:
    B, N, M, H, L, K = raw.shape
    return softmax(raw.reshape(B, N, M, H, L * K)).reshape(raw.shape)


def sampling_spec(
    ce_f: torch.Tensor,
    pe: torch.Tensor,
    ref_points: torch.Tensor,
    linear2: nn.Linear,
    linear3: nn.Linear,
    dims: tuple,
) -> SamplingSpec:
    """Offsets and attention weights from ``ce_f + pe``; dims = (M, H, L, K)."""
    M, H, L, K = dims
    n = M * H * L * K
    if linear2.out_features != 2 * n or linear3.out_features != n:
        raise DomainError(
            f"offset/weight maps output {linear2.out_features}/{linear3.out_features}, need {2 * n}/{n}"
        )
    batched = ce_f.dim() == 3
    if not batched:
        ce_f, pe, ref_points = ce_f[None], pe[None], ref_points[None]
    B, N, _ = ce_f.shape
    q = ce_f + pe
    offsets = linear2(q).view(B, N, M, H, L, K, 2)
    raw = linear3(q).view(B, N, M, H, L, K)
    if ref_points.shape[0] != B:
        ref_points = ref_points.expand(B, -1, -1)
    return SamplingSpec(ref_points, offsets, raw, joint_softmax(raw), modal_softmax(raw))


def _levels(pyramids) -> list:
    return [p.levels if hasattr(p, "levels") else list(p) for p in pyramids]


def modality_partials(spec: SamplingSpec, pyramids, weights: torch.Tensor) -> torch.Tensor:
    """(..., B, N, M, H, C): per-modality weighted sums of raw samples."""
    maps = _levels(pyramids)
    M, H, L, K = spec.dims
    if len(maps) != M or any(len(lv) != L for lv in maps):
        raise DomainError("pyramids do not match the sampling spec")
    return aggregate(maps, spec.ref_points, spec.offsets, weights)


def fused_attention(spec: SamplingSpec, pyramids: Sequence, value_proj: nn.Linear, out_proj: nn.Linear) -> torch.Tensor:
    """Fusion-branch aggregation over all modalities under the joint weights."""
    parts = modality_partials(spec, pyramids, spec.joint_weights)
    wsum = spec.joint_weights.sum(dim=(2, 4, 5))
    return project_heads(parts.sum(dim=2), wsum, value_proj, out_proj)


def modal_attention(spec: SamplingSpec, pyramid, m: int, value_proj: nn.Linear, out_proj: nn.Linear) -> torch.Tensor:
    """Uni-modal aggregation of modality index ``m`` under its own softmax."""
    w = spec.modal_weights[:, :, m : m + 1]
    one = SamplingSpec(spec.ref_points, spec.offsets[:, :, m : m + 1], spec.raw_weights[:, :, m : m + 1], w, w)
    parts = modality_partials(one, [pyramid], w)
    return project_heads(parts[:, :, 0], w.sum(dim=(2, 4, 5)), value_proj, out_proj)


class MultiModalCrossAttention(nn.Module):
    """One cross-attention block shared by every decoder branch of a layer."""

    def __init__(self, d_model: int, heads: int, levels: int, points: int, modalities: int = 2):
        super().__init__()
        if d_model % heads:
            raise DomainError("d_model must be divisible by heads")
        self.dims = (modalities, heads, levels, points)
        n = modalities * heads * levels * points
        self.linear2 = linear_map(d_model, 2 * n)
        self.linear3 = linear_map(d_model, n)
        self.value_proj = linear_map(d_model, d_model)
        self.out_proj = linear_map(d_model, d_model)
        init_sampling_linears(self.linear2, self.linear3, heads, levels, points, modalities)
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.zeros_(self.value_proj.bias)
        nn.init.xavier_uniform_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def spec(self, ce_f, pe, ref_points) -> SamplingSpec:
        return sampling_spec(ce_f, pe, ref_points, self.linear2, self.linear3, self.dims)

    def forward(self, ce_f, pe, ref_points, pyramids, branches=("V", "F", "T")):
        """Returns ``(spec, {branch: (B, N, d)})``.

        Branch F gets the fused output; V and T get modality 0 and 1 under
        their own normalization. Sampling is done once for all branches.
        """
        spec = self.spec(ce_f, pe, ref_points)
        maps = _levels(pyramids)
        groups = [spec.joint_weights]
        if any(b != "F" for b in branches):
            groups.append(spec.modal_weights)
        parts = aggregate(maps, spec.ref_points, spec.offsets, torch.stack(groups))
        out = {}
        for b in branches:
            if b == "F":
                out[b] = project_heads(
                    parts[0].sum(dim=2), spec.joint_weights.sum(dim=(2, 4, 5)), self.value_proj, self.out_proj
                )
            else:
                m = MODALITIES.index(b)
                w = spec.modal_weights[:, :, m]
                out[b] = project_heads(parts[1][:, :, m], w.sum(dim=(3, 4)), self.value_proj, self.out_proj)
        return spec, out


def point_dump_rows(spec: SamplingSpec, image_size: tuple, level_shapes, queries, batch_index: int = 0,
                    weights: str = "joint"):
    """Absolute image coordinates and weights of every sampling point.

    Yields ``(query_id, modality, head, level, point, x, y, weight, in_bounds)``
    with x, y in pixels (0 = left/top image edge).
    """
    Himg, Wimg = image_size
    M, H, L, K = spec.dims
    scale = torch.tensor([[w, h] for h, w in level_shapes], dtype=DTYPE)
    w_all = spec.joint_weights if weights == "joint" else spec.modal_weights
    names = MODALITIES if M == 2 else ("F",)
    with torch.no_grad():
        for q in queries:
            ref = spec.ref_points[batch_index, q]
            for m in range(M):
                for h in range(H):
                    for l in range(L):
                        for k in range(K):
                            loc = ref + spec.offsets[batch_index, q, m, h, l, k] / scale[l]
                            x, y = loc[0].item(), loc[1].item()
                            inside = 0.0 <= x <= 1.0 and 0.0 <= y <= 1.0
                            yield (
                                int(q), names[m], h, l, k, x * Wimg, y * Himg,
                                w_all[batch_index, q, m, h, l, k].item(), inside,
                            )
