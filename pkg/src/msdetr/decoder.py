"""Trident decoder, detection heads and the three fusion-strategy detectors."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .backbone import Backbone, FeaturePyramid, ModalityExtractor, conv, feed_forward, group_norm
from .config import ExperimentConfig
from .msca import MultiModalCrossAttention, QuerySet, reference_points
from .numeric import DTYPE, DomainError, inverse_sigmoid, linear_map, logit

BRANCHES = ("V", "F", "T")
CLASS_PRIOR = 0.01
INIT_BOX_SIZE = 0.2


@dataclass
class DetectionSet:
    """N prediction slots of one branch for one image."""

    branch: str
    prob: torch.Tensor  # (N,)
    boxes: torch.Tensor  # (N, 4) cx, cy, w, h

    def __len__(self) -> int:
        return self.prob.shape[0]


class TridentDecoderLayer(nn.Module):
    """Self-attention, cross-attention and FFN, each one instance used by every branch."""

    def __init__(self, d_model, heads, levels, points, ffn_dim, modalities=2):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(d_model, heads, dropout=0.0, batch_first=True, dtype=DTYPE)
        self.norm1 = nn.LayerNorm(d_model, dtype=DTYPE)
        self.cross_attn = MultiModalCrossAttention(d_model, heads, levels, points, modalities)
        self.norm2 = nn.LayerNorm(d_model, dtype=DTYPE)
        self.ffn = feed_forward(d_model, ffn_dim)
        self.norm3 = nn.LayerNorm(d_model, dtype=DTYPE)

    def forward(self, ce: dict, pe: torch.Tensor, ref: torch.Tensor, pyramids) -> tuple:
        branches = tuple(ce)
        nb = len(branches)
        x = torch.cat([ce[b] for b in branches], dim=0)  # (nb*B, N, d)
        pos = pe.repeat(nb, 1, 1)
        q = x + pos
        sa, _ = self.self_attn(q, q, x, need_weights=False)
        x = self.norm1(x + sa)
        B = pe.shape[0]
        post_sa = dict(zip(branches, x.split(B)))
        spec, ca = self.cross_attn(post_sa["F"], pe, ref, pyramids, branches)
        x = self.norm2(x + torch.cat([ca[b] for b in branches], dim=0))
        x = self.norm3(x + self.ffn(x))
        return dict(zip(branches, x.split(B))), spec


class TridentDecoder(nn.Module):
    def __init__(self, d_model, heads, levels, points, ffn_dim, layers, modalities=2, ref_gain=None):
        super().__init__()
        self.linear1 = linear_map(d_model, 2)
        self.layers = nn.ModuleList(
            TridentDecoderLayer(d_model, heads, levels, points, ffn_dim, modalities) for _ in range(layers)
        )
        # pe is drawn with sigma 0.02; scale the reference map so points start spread over the image
        gain = ref_gain if ref_gain is not None else 1.0 / (0.02 * d_model**0.5)
        nn.init.normal_(self.linear1.weight, std=gain)
        nn.init.zeros_(self.linear1.bias)

    def forward(self, ce: dict, pe: torch.Tensor, pyramids) -> tuple:
        """Returns ``(ref, [(ce_dict, spec) per layer])``."""
        ref = reference_points(pe, self.linear1)
        outs = []
        for layer in self.layers:
            ce, spec = layer(ce, pe, ref, pyramids)
            outs.append((ce, spec))
        return ref, outs


def decode(pyr_v, pyr_t, queries: QuerySet, params: TridentDecoder, batch: int | None = None):
    """Run the trident decoder; returns per-layer ``(ce_v, ce_f, ce_t)`` triples."""
    B = pyr_v.levels[0].shape[0] if batch is None else batch
    ce = {b: queries.content(b).expand(B, -1, -1) for b in BRANCHES}
    pe = queries.pe.expand(B, -1, -1)
    _, outs = params(ce, pe, [pyr_v, pyr_t])
    return [(c["V"], c["F"], c["T"]) for c, _ in outs]


class DetectionHead(nn.Module):
    """Class logit and box offsets for one branch."""

    def __init__(self, d_model: int):
        super().__init__()
        self.cls = linear_map(d_model, 1)
        self.box = nn.Sequential(linear_map(d_model, d_model), nn.ReLU(), linear_map(d_model, 4))
        nn.init.constant_(self.cls.bias, logit(CLASS_PRIOR))
        nn.init.zeros_(self.box[2].weight)
        with torch.no_grad():
            self.box[2].bias.copy_(torch.tensor([0.0, 0.0, logit(INIT_BOX_SIZE), logit(INIT_BOX_SIZE)]))

    def forward(self, ce: torch.Tensor, ref: torch.Tensor):
        prob = torch.sigmoid(self.cls(ce)[..., 0])
        delta = self.box(ce)
        centre = torch.sigmoid(inverse_sigmoid(ref) + delta[..., :2])
        size = torch.sigmoid(delta[..., 2:])
        return prob, torch.cat([centre, size], dim=-1)


def predict_slots(ce: torch.Tensor, head: DetectionHead, ref_points: torch.Tensor, branch: str = "F") -> DetectionSet:
    prob, boxes = head(ce, ref_points)
    return DetectionSet(branch, prob, boxes)


@dataclass
class ModelOutput:
    """Per branch, per decoder layer ``(prob (B, N), boxes (B, N, 4))``."""

    preds: dict
    specs: list  # SamplingSpec per layer
    ref_points: torch.Tensor
    pyramids: list

    @property
    def branches(self) -> tuple:
        return tuple(self.preds)

    def final(self, branch: str):
        return self.preds[branch][-1]

    def detection_set(self, branch: str, index: int = 0, layer: int = -1) -> DetectionSet:
        prob, boxes = self.preds[branch][layer]
        return DetectionSet(branch, prob[index], boxes[index])


class _Detector(nn.Module):
    branches: tuple = ("F",)

    def _queries(self, cfg: ExperimentConfig, branches):
        n, d = cfg.queries, cfg.d_model
        self.pe = nn.Parameter(torch.randn(n, d, dtype=DTYPE) * 0.02)
        self.ce = nn.ParameterDict({b: nn.Parameter(torch.randn(n, d, dtype=DTYPE) * 0.02) for b in branches})

    def query_set(self) -> QuerySet:
        f = self.ce["F"]
        return QuerySet(self.pe, self.ce["V"] if "V" in self.ce else f, f, self.ce["T"] if "T" in self.ce else f)

    def _decode(self, pyramids, B) -> ModelOutput:
        ce = {b: self.ce[b].expand(B, -1, -1) for b in self.branches}
        pe = self.pe.expand(B, -1, -1)
        ref, outs = self.decoder(ce, pe, pyramids)
        layers = outs if self.aux_loss else outs[-1:]
        preds = {b: [self.heads[b](c[b], ref) for c, _ in layers] for b in self.branches}
        return ModelOutput(preds, [s for _, s in outs], ref, pyramids)

    def _decoder(self, cfg, modalities):
        self.aux_loss = cfg.aux_loss
        self.decoder = TridentDecoder(
            cfg.d_model, cfg.heads, cfg.levels, cfg.points, cfg.ffn_dim, cfg.dec_layers, modalities
        )
        self.heads = nn.ModuleDict({b: DetectionHead(cfg.d_model) for b in self.branches})


class LooselyCoupledDETR(_Detector):
    """Two modality-specific extractors feeding the trident decoder."""

    branches = BRANCHES

    def __init__(self, cfg: ExperimentConfig):
        super().__init__()
        kw = dict(d_model=cfg.d_model, levels=cfg.levels, heads=cfg.heads, points=cfg.points,
                  layers=cfg.enc_layers, ffn_dim=cfg.ffn_dim, stem_channels=cfg.stem_channels)
        self.extract = nn.ModuleDict({
            "V": ModalityExtractor("V", cfg.channels_v, **kw),
            "T": ModalityExtractor("T", cfg.channels_t, **kw),
        })
        self._decoder(cfg, modalities=2)
        self._queries(cfg, self.branches)

    def pyramids(self, img_v, img_t) -> list:
        return [self.extract["V"](img_v), self.extract["T"](img_t)]

    def forward(self, img_v, img_t) -> ModelOutput:
        return self._decode(self.pyramids(img_v, img_t), img_v.shape[0])


class EarlyConcatDETR(_Detector):
    """Modalities concatenated after the first convolution; one shared trunk and a single branch."""

    def __init__(self, cfg: ExperimentConfig):
        super().__init__()
        c = cfg.stem_channels
        self.stem_v = Backbone(cfg.channels_v, cfg.d_model, cfg.levels, c, with_trunk=False)
        self.stem_t = Backbone(cfg.channels_t, cfg.d_model, cfg.levels, c, with_trunk=False)
        self.fuse = nn.Sequential(conv(2 * c, c, stride=1), group_norm(c), nn.ReLU())
        self.trunk = Backbone(2 * c, cfg.d_model, cfg.levels, c, with_stem0=False)
        self.encoder = ModalityExtractor("F", 0, cfg.d_model, cfg.levels, cfg.heads, cfg.points,
                                         cfg.enc_layers, cfg.ffn_dim, c, backbone=False)
        self._decoder(cfg, modalities=1)
        self._queries(cfg, self.branches)

    def forward(self, img_v, img_t) -> ModelOutput:
        x = torch.cat([self.stem_v.stem0(img_v), self.stem_t.stem0(img_t)], dim=1)
        pyr = self.encoder.encode(FeaturePyramid("F", self.trunk.trunk(self.fuse(x))))
        return self._decode([pyr], img_v.shape[0])


class LateConcatDETR(_Detector):
    """Per-modality extractors whose encoder outputs are concatenated level by level."""

    def __init__(self, cfg: ExperimentConfig):
        super().__init__()
        kw = dict(d_model=cfg.d_model, levels=cfg.levels, heads=cfg.heads, points=cfg.points,
                  layers=cfg.enc_layers, ffn_dim=cfg.ffn_dim, stem_channels=cfg.stem_channels)
        self.extract = nn.ModuleDict({
            "V": ModalityExtractor("V", cfg.channels_v, **kw),
            "T": ModalityExtractor("T", cfg.channels_t, **kw),
        })
        d = cfg.d_model
        self.fuse = nn.ModuleList(
            nn.Sequential(conv(2 * d, d, stride=1), group_norm(d), nn.ReLU()) for _ in range(cfg.levels)
        )
        self._decoder(cfg, modalities=1)
        self._queries(cfg, self.branches)

    def forward(self, img_v, img_t) -> ModelOutput:
        pv, pt = self.extract["V"](img_v), self.extract["T"](img_t)
        levels = []
        for fv, ft, fuse in zip(pv.levels, pt.levels, self.fuse):
            x = torch.cat([fv, ft], dim=-1).permute(0, 3, 1, 2)
            levels.append(fuse(x).permute(0, 2, 3, 1))
        return self._decode([FeaturePyramid("F", levels)], img_v.shape[0])


MODELS = {
    "loosely_coupled": LooselyCoupledDETR,
    "early_concat": EarlyConcatDETR,
    "late_concat": LateConcatDETR,
}


def build_model(cfg: ExperimentConfig, seed: int | None = None) -> _Detector:
    if seed is not None:
        torch.manual_seed(seed)
    return MODELS[cfg.fusion_strategy](cfg)


def infer(img_v, img_t, model: _Detector, branch: str = "F") -> list:
    """Final-layer slots of ``branch`` for every image in the batch."""
    if branch not in model.branches:
        raise DomainError(f"model has no branch {branch!r}; available: {model.branches}")
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model(img_v, img_t)
    model.train(was_training)
    prob, boxes = out.final(branch)
    return [DetectionSet(branch, prob[i], boxes[i]) for i in range(prob.shape[0])]
