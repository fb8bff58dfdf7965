"""Modality-specific feature extraction: convolutional pyramid plus deformable encoder."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .deform import aggregate_heads, init_sampling_linears
from .numeric import DTYPE, DomainError, linear_map, softmax


@dataclass
class FeaturePyramid:
    modality: str  # "V", "T" or "F" for an already-fused pyramid
    levels: list  # (B, H_l, W_l, d) per level, finest first

    def __post_init__(self):
        d = {f.shape[-1] for f in self.levels}
        if len(d) != 1:
            raise DomainError("pyramid levels must share the channel width")
        for a, b in zip(self.levels, self.levels[1:]):
            if b.shape[1] != math.ceil(a.shape[1] / 2) or b.shape[2] != math.ceil(a.shape[2] / 2):
                raise DomainError("each level must halve the previous one")

    @property
    def shapes(self) -> list:
        return [tuple(f.shape[1:3]) for f in self.levels]

    @property
    def channels(self) -> int:
        return self.levels[0].shape[-1]

    def flatten(self) -> torch.Tensor:
        return torch.cat([f.flatten(1, 2) for f in self.levels], dim=1)

    def like(self, flat: torch.Tensor) -> "FeaturePyramid":
        out, start = [], 0
        for h, w in self.shapes:
            out.append(flat[:, start : start + h * w].reshape(flat.shape[0], h, w, -1))
            start += h * w
        return FeaturePyramid(self.modality, out)


def conv(cin: int, cout: int, stride: int = 2, k: int = 3) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, dtype=DTYPE)


def group_norm(d: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, d), d, dtype=DTYPE)


class Backbone(nn.Module):
    """Stride-4 stem and ``levels`` stride-2 stages; stage outputs are the pyramid.

    Split into :meth:`stem0` (the first convolution) and :meth:`trunk` so an
    early-fusion model can merge modalities between them.
    """

    def __init__(self, in_channels: int, d_model: int = 32, levels: int = 4, stem_channels: int = 16,
                 with_stem0: bool = True, with_trunk: bool = True):
        super().__init__()
        self.in_channels = in_channels
        self.levels = levels
        if with_stem0:
            self.conv0 = conv(in_channels, stem_channels)
        if with_trunk:
            self.conv1 = conv(stem_channels, d_model)
            self.stages = nn.ModuleList(conv(d_model, d_model) for _ in range(levels))
            self.proj = nn.ModuleList(
                nn.Sequential(conv(d_model, d_model, stride=1, k=1), group_norm(d_model)) for _ in range(levels)
            )

    @property
    def coarsest_stride(self) -> int:
        return 2 ** (2 + self.levels)

    def check(self, image: torch.Tensor) -> None:
        if image.dim() != 4 or image.shape[1] != self.in_channels:
            raise DomainError(f"expected (B, {self.in_channels}, H, W) input, got {tuple(image.shape)}")
        s = self.coarsest_stride
        if image.shape[2] % s or image.shape[3] % s:
            raise DomainError(f"image size {tuple(image.shape[2:])} not divisible by stride {s}")

    def stem0(self, image: torch.Tensor) -> torch.Tensor:
        self.check(image)
        return torch.relu(self.conv0(image))

    def trunk(self, x: torch.Tensor) -> list:
        x = torch.relu(self.conv1(x))
        out = []
        for stage, proj in zip(self.stages, self.proj):
            x = torch.relu(stage(x))
            out.append(proj(x).permute(0, 2, 3, 1))
        return out

    def forward(self, image: torch.Tensor) -> list:
        return self.trunk(self.stem0(image))


def sine_embedding(shapes, d_model: int, temperature: float = 10000.0) -> torch.Tensor:
    """Fixed 2-D sinusoidal encodings of texel centres, all levels concatenated: (S, d)."""
    half = d_model // 2
    dim_t = temperature ** (2 * (torch.arange(half, dtype=DTYPE) // 2) / half)
    out = []
    for h, w in shapes:
        ys = (torch.arange(h, dtype=DTYPE) + 0.5) / h * 2 * math.pi
        xs = (torch.arange(w, dtype=DTYPE) + 0.5) / w * 2 * math.pi
        py = ys[:, None] / dim_t
        px = xs[:, None] / dim_t
        py = torch.stack([py[:, 0::2].sin(), py[:, 1::2].cos()], -1).flatten(1)
        px = torch.stack([px[:, 0::2].sin(), px[:, 1::2].cos()], -1).flatten(1)
        grid = torch.cat([py[:, None, :].expand(h, w, -1), px[None, :, :].expand(h, w, -1)], -1)
        out.append(grid.reshape(h * w, d_model))
    return torch.cat(out, 0)


def texel_centres(shapes) -> torch.Tensor:
    out = []
    for h, w in shapes:
        ys = (torch.arange(h, dtype=DTYPE) + 0.5) / h
        xs = (torch.arange(w, dtype=DTYPE) + 0.5) / w
        yy, xx = torch.meshgrid(ys, xs, indexing="ij")
        out.append(torch.stack([xx, yy], -1).reshape(-1, 2))
    return torch.cat(out, 0)


def feed_forward(d_model: int, hidden: int) -> nn.Sequential:
    return nn.Sequential(linear_map(d_model, hidden), nn.ReLU(), linear_map(hidden, d_model))


class DeformableEncoderLayer(nn.Module):
    """Deformable self-attention over one modality's pyramid, then a feed-forward sublayer."""

    def __init__(self, d_model: int, heads: int, levels: int, points: int, ffn_dim: int):
        super().__init__()
        self.dims = (1, heads, levels, points)
        n = heads * levels * points
        self.offsets = linear_map(d_model, 2 * n)
        self.weights = linear_map(d_model, n)
        self.value_proj = linear_map(d_model, d_model)
        self.out_proj = linear_map(d_model, d_model)
        init_sampling_linears(self.offsets, self.weights, heads, levels, points)
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.zeros_(self.value_proj.bias)
        nn.init.xavier_uniform_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)
        self.norm1 = nn.LayerNorm(d_model, dtype=DTYPE)
        self.ffn = feed_forward(d_model, ffn_dim)
        self.norm2 = nn.LayerNorm(d_model, dtype=DTYPE)

    def attention(self, pyramid: FeaturePyramid, pos: torch.Tensor) -> torch.Tensor:
        src = pyramid.flatten()
        B, S, _ = src.shape
        M, H, L, K = self.dims
        if len(pyramid.levels) != L:
            raise DomainError(f"encoder expects {L} levels, got {len(pyramid.levels)}")
        q = src + pos
        ref = texel_centres(pyramid.shapes).expand(B, -1, -1)
        offsets = self.offsets(q).view(B, S, H, L, K, 2)
        w = softmax(self.weights(q).view(B, S, H, L * K)).view(B, S, H, L, K)
        values = pyramid.like(self.value_proj(src)).levels
        values = [v.unflatten(-1, (H, -1)) for v in values]
        out = aggregate_heads(values, ref, offsets, w)
        return self.out_proj(out.flatten(-2))

    def forward(self, pyramid: FeaturePyramid, pos: torch.Tensor) -> FeaturePyramid:
        x = self.norm1(pyramid.flatten() + self.attention(pyramid, pos))
        x = self.norm2(x + self.ffn(x))
        return pyramid.like(x)


class ModalityExtractor(nn.Module):
    """Backbone plus encoder of one modality; ``layers = 0`` leaves the pyramid unchanged."""

    def __init__(self, modality: str, in_channels: int, d_model=32, levels=4, heads=8, points=4,
                 layers=2, ffn_dim=64, stem_channels=16, backbone: bool = True):
        super().__init__()
        self.modality = modality
        self.backbone = Backbone(in_channels, d_model, levels, stem_channels) if backbone else None
        self.level_embed = nn.Parameter(torch.zeros(levels, d_model, dtype=DTYPE))
        nn.init.normal_(self.level_embed, std=0.02)
        self.layers = nn.ModuleList(
            DeformableEncoderLayer(d_model, heads, levels, points, ffn_dim) for _ in range(layers)
        )
        self.d_model = d_model

    def positions(self, shapes) -> torch.Tensor:
        level_ids = torch.cat([torch.full((h * w,), i, dtype=torch.long) for i, (h, w) in enumerate(shapes)])
        return (sine_embedding(shapes, self.d_model) + self.level_embed[level_ids])[None]

    def encode(self, pyramid: FeaturePyramid) -> FeaturePyramid:
        if not self.layers:
            return pyramid
        pos = self.positions(pyramid.shapes)
        for layer in self.layers:
            pyramid = layer(pyramid, pos)
        return pyramid

    def forward(self, image: torch.Tensor) -> FeaturePyramid:
        return self.encode(FeaturePyramid(self.modality, self.backbone(image)))


def extract_pyramid(image: torch.Tensor, params: ModalityExtractor, modality: str) -> FeaturePyramid:
    """Backbone features of one modality (before the encoder)."""
    if modality != params.modality:
        raise DomainError(f"parameters belong to modality {params.modality}, not {modality}")
    return FeaturePyramid(modality, params.backbone(image))


def encoder_layer(pyramid: FeaturePyramid, params: DeformableEncoderLayer, pos: torch.Tensor | None = None):
    if pos is None:
        pos = torch.zeros(1, 1, pyramid.channels, dtype=DTYPE)
    return params(pyramid, pos)
