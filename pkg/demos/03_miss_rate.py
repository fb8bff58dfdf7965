"""Miss rate against false positives per image, for a detector that gets noisier.

Run with ``python3 demos/03_miss_rate.py``.
"""
import numpy as np

from msdetr.metrics import EvalConfig, average_precision, mr2

rng = np.random.default_rng(0)

# %% Fifty images with up to three people each.
gts = []
for _ in range(50):
    n = rng.integers(0, 4)
    xy = rng.uniform(0, 50, size=(n, 2))
    wh = np.column_stack([rng.uniform(8, 14, n), rng.uniform(20, 40, n)])
    boxes = np.column_stack([xy, xy + wh])
    gts.append((boxes, [{"height_px": h, "occlusion": "none"} for h in wh[:, 1]]))


def detector(jitter, clutter):
    out = []
    for boxes, _ in gts:
        hits = boxes + rng.normal(0, jitter, boxes.shape)
        scores = rng.uniform(0.5, 1.0, len(boxes))
        fx = rng.uniform(0, 50, size=(clutter, 2))
        false = np.column_stack([fx, fx + [10, 30]])
        out.append((np.vstack([hits, false]), np.r_[scores, rng.uniform(0.0, 0.8, clutter)]))
    return out


# %% Box jitter and false alarms both push MR^-2 up and AP down.
for jitter, clutter in [(0.0, 0), (1.0, 1), (2.5, 2), (4.0, 4)]:
    dets = detector(jitter, clutter)
    value, curve = mr2(dets, gts)
    ap = average_precision(dets, gts)
    print(f"jitter {jitter:3.1f} clutter {clutter}: MR^-2 {value:.4f}  AP {ap['AP']:.3f}  AP50 {ap['AP50']:.3f}")

# %% Short figures as ignore regions: hits on them stop counting either way.
tall = EvalConfig(filter=lambda a: a["height_px"] >= 30)
print("tall only:", round(mr2(detector(2.5, 2), gts, tall)[0], 4))
