"""Sparse sampling and the two ways of normalizing attention weights.

Run with ``python3 demos/01_sampling_and_fusion.py``.
"""
import numpy as np
import torch

from msdetr.backbone import FeaturePyramid
from msdetr.msca import MultiModalCrossAttention, joint_softmax, modal_softmax
from msdetr.numeric import DTYPE, bilinear_sample

torch.manual_seed(0)

# %% Bilinear sampling uses texel centres: (j + 0.5) / W hits texel j exactly.
fmap = torch.tensor([[1.0, 2.0], [3.0, 4.0]], dtype=DTYPE)
for loc in [(0.25, 0.25), (0.5, 0.5), (0.75, 0.25), (1.2, 0.5)]:
    print(f"sample at {loc}: {bilinear_sample(fmap, loc).item():.3f}")

# %% One raw weight per (modality, head, level, point) for a single query.
raw = torch.randn(1, 1, 2, 1, 2, 3, dtype=DTYPE) * 2
joint = joint_softmax(raw)
modal = modal_softmax(raw)
print("joint mass on V, T:", joint.sum(dim=(4, 5)).flatten().tolist())
print("modal mass on V, T:", modal.sum(dim=(4, 5)).flatten().tolist())
# the fused branch lets one modality dominate; the modal branches always see a full unit of weight

# %% A cross-attention block over two tiny pyramids.
d, heads, levels, points = 8, 2, 2, 2
block = MultiModalCrossAttention(d, heads, levels, points, 2)
pyr = [FeaturePyramid(m, [torch.randn(1, 8, 8, d, dtype=DTYPE), torch.randn(1, 4, 4, d, dtype=DTYPE)])
       for m in "VT"]
ce = torch.randn(1, 3, d, dtype=DTYPE)
pe = torch.randn(1, 3, d, dtype=DTYPE)
ref = torch.rand(1, 3, 2, dtype=DTYPE)
spec, out = block(ce, pe, ref, pyr)
for b in ("V", "F", "T"):
    print(b, out[b].shape, round(out[b].norm().item(), 4))

# %% Silence the thermal pyramid: V is unchanged, F moves, T falls to its bias terms (zero at init).
dark = [pyr[0], FeaturePyramid("T", [torch.zeros_like(x) for x in pyr[1].levels])]
_, out_dark = block(ce, pe, ref, dark)
for b in ("V", "F", "T"):
    print(f"{b}: change {(out_dark[b] - out[b]).norm().item():.4f}")

# %% Initial offsets of the first query, V modality, head 0, level 0, in texels: a star around the reference.
print(np.round(spec.offsets[0, 0, 0, 0, 0].detach().numpy(), 2))
