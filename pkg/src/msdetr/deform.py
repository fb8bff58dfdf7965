"""Sparse multi-scale sampling shared by the encoder and the cross-attention.

Layout conventions: ``maps[m][l]`` is the level-``l`` map of modality ``m``
with shape (B, H_l, W_l, C); offsets are (B, Q, M, H, L, K, 2) in level
texel units; weights are (..., B, Q, M, H, L, K).
"""
from __future__ import annotations

import math
from typing import Sequence

import torch
from torch import nn

from .numeric import DTYPE, sample_grid


def sampling_locations(ref: torch.Tensor, offsets: torch.Tensor, shapes: Sequence[tuple]) -> torch.Tensor:
    """Normalized sampling locations: ``ref + offset / (W_l, H_l)`` per level."""
    scale = torch.tensor([[w, h] for h, w in shapes], dtype=DTYPE)  # (L, 2)
    # ref: (B, Q, 2) -> (B, Q, 1, 1, 1, 1, 2)
    return ref[:, :, None, None, None, None, :] + offsets / scale[None, None, None, None, :, None, :]


def aggregate(maps, ref: torch.Tensor, offsets: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Weighted sums of raw sampled features, kept separate per modality.

    ``weights`` may carry leading group dims, e.g. (G, B, Q, M, H, L, K),
    so several weightings share one round of sampling. Returns
    (..., B, Q, M, H, C).
    """
    shapes = [tuple(f.shape[1:3]) for f in maps[0]]
    loc = sampling_locations(ref, offsets, shapes)
    per_mod = []
    for m, levels in enumerate(maps):
        # (B, Q, H, L*K, C): every level's samples side by side, then one weighted sum
        s = torch.cat([sample_grid(fmap, loc[:, :, m, :, l]) for l, fmap in enumerate(levels)], dim=-2)
        w = weights[..., m, :, :, :].flatten(-2)
        per_mod.append((s * w[..., None]).sum(dim=-2))
    return torch.stack(per_mod, dim=-3)


def aggregate_heads(values, ref: torch.Tensor, offsets: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Single-modality aggregation over already value-projected maps.

    values[l]: (B, H_l, W_l, H, dh), each head sampling only its own
    channels; offsets (B, Q, H, L, K, 2); weights (B, Q, H, L, K).
    Returns (B, Q, H, dh).
    """
    shapes = [tuple(v.shape[1:3]) for v in values]
    loc = sampling_locations(ref, offsets[:, :, None], shapes)[:, :, 0]  # (B, Q, H, L, K, 2)
    B, Q, H, L, K, _ = loc.shape
    samples = []
    for l, v in enumerate(values):
        h_l, w_l, dh = v.shape[1], v.shape[2], v.shape[-1]
        maps = v.permute(0, 3, 1, 2, 4).reshape(B * H, h_l, w_l, dh)
        pts = loc[:, :, :, l].permute(0, 2, 1, 3, 4).reshape(B * H, Q * K, 2)
        samples.append(sample_grid(maps, pts).view(B, H, Q, K, dh))
    s = torch.cat(samples, dim=3)  # (B, H, Q, L*K, dh)
    w = weights.permute(0, 2, 1, 3, 4).flatten(-2)  # (B, H, Q, L*K)
    return (s * w[..., None]).sum(dim=-2).transpose(1, 2)


def project_heads(agg: torch.Tensor, wsum: torch.Tensor, value_proj: nn.Linear, out_proj: nn.Linear) -> torch.Tensor:
    """Apply the per-head value maps to aggregated raw samples, then the output map.

    agg: (..., H, C) weighted sums of raw samples; wsum: (..., H) the weight
    mass behind each sum, so the value bias enters exactly as it would if
    every sample were projected before weighting.
    """
    H = agg.shape[-2]
    C = agg.shape[-1]
    dh = value_proj.out_features // H
    Wv = value_proj.weight.view(H, dh, C)
    v = torch.einsum("...hc,hec->...he", agg, Wv)
    if value_proj.bias is not None:
        v = v + value_proj.bias.view(H, dh) * wsum[..., None]
    return out_proj(v.flatten(-2))


def star_offsets(heads: int, levels: int, points: int, modalities: int = 1) -> torch.Tensor:
    """Initial offsets: head ``h`` points along angle 2*pi*h/H, point ``k`` at distance k+1."""
    theta = torch.arange(heads, dtype=DTYPE) * (2 * math.pi / heads)
    grid = torch.stack([theta.cos(), theta.sin()], -1)
    grid = grid / grid.abs().max(-1, keepdim=True).values
    grid = grid.view(1, heads, 1, 1, 2).repeat(modalities, 1, levels, points, 1)
    for k in range(points):
        grid[:, :, :, k, :] *= k + 1
    return grid  # (M, H, L, K, 2)


def init_sampling_linears(offset_lin: nn.Linear, weight_lin: nn.Linear, heads, levels, points, modalities=1):
    """Zero weights; offset biases form a star around the reference, attention starts uniform."""
    nn.init.zeros_(offset_lin.weight)
    with torch.no_grad():
        offset_lin.bias.copy_(star_offsets(heads, levels, points, modalities).reshape(-1))
    nn.init.zeros_(weight_lin.weight)
    nn.init.zeros_(weight_lin.bias)
