"""Synthetic paired visible/thermal scenes with controllable misalignment.

Figures are procedurally drawn (head, torso, arms, legs) and every figure
touches all four sides of its box, so ground-truth boxes are pixel-exact.
A shared figure is drawn in both images, the thermal copy displaced by the
scene's shift; unpaired figures appear in one modality only.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .matching import GroundTruthInstance
from .numeric import DomainError

VISIBILITY = ("both", "V-only", "T-only")
MODALITY_DIRS = {"V": "visible", "T": "thermal"}


class DatasetFormatError(ValueError):
    pass


@dataclass
class SceneConfig:
    image_size: tuple = (64, 64)  # (H, W)
    min_instances: int = 1
    max_instances: int = 3
    shift_range: tuple = (0, 6)  # integer shift magnitude in px, inclusive
    shift_axis: str = "x"  # "x", "y" or "xy" (random direction on a square ring)
    fixed_shift: tuple | None = None  # (dx, dy); overrides shift_range
    instance_jitter: int = 0  # extra per-instance thermal jitter, +-px
    visibility_probs: tuple = (0.7, 0.15, 0.15)  # both, V-only, T-only
    night_prob: float = 0.5
    day_contrast: float = 0.9
    night_contrast: float = 0.35
    day_noise: float = 0.03
    night_noise: float = 0.06
    thermal_contrast: float = 0.7
    thermal_noise: float = 0.04
    height_range: tuple = (18, 40)
    aspect_range: tuple = (0.4, 0.55)  # width / height
    max_retries: int = 60
    rng_seed: int = 0

    def __post_init__(self):
        H, W = self.image_size
        lim = min(H, W) / 4
        if self.fixed_shift is not None:
            dx, dy = self.fixed_shift
            if abs(dx) >= lim or abs(dy) >= lim:
                raise DomainError(f"shift {self.fixed_shift} must stay below {lim} px")
        lo, hi = self.shift_range
        if not 0 <= lo <= hi or hi + self.instance_jitter >= lim:
            raise DomainError(f"shift range {self.shift_range} must stay below {lim} px")
        p = np.asarray(self.visibility_probs, dtype=float)
        if p.shape != (3,) or (p < 0).any() or abs(p.sum() - 1) > 1e-9:
            raise DomainError("visibility probabilities must be three non-negatives summing to 1")
        if self.height_range[1] > H or self.height_range[0] < 4:
            raise DomainError("figure heights must fit the image")


@dataclass
class ScenePair:
    image_v: np.ndarray  # (H, W, 3) uint8
    image_t: np.ndarray  # (H, W, 1) uint8
    gts_v: list
    gts_t: list
    metadata: dict = field(default_factory=dict)

    @property
    def size(self) -> tuple:
        return self.image_v.shape[:2]

    def targets(self) -> list:
        """One box per figure: the visible box when the figure is visible, else the thermal box."""
        by_id = {g.attributes["identity"]: g for g in self.gts_v}
        t_ids = {g.attributes["identity"] for g in self.gts_t}
        out = []
        for g in self.gts_v:
            vis = "VT" if g.attributes["identity"] in t_ids else "V"
            out.append(GroundTruthInstance(g.box, {**g.attributes, "visible_in": vis}))
        for g in self.gts_t:
            if g.attributes["identity"] not in by_id:
                out.append(GroundTruthInstance(g.box, {**g.attributes, "visible_in": "T"}))
        return sorted(out, key=lambda g: g.attributes["identity"])


# -- drawing --------------------------------------------------------------


def figure_mask(h: int, w: int) -> np.ndarray:
    """Boolean (h, w) silhouette touching every side of its box."""
    yy, xx = np.mgrid[0:h, 0:w]
    yc = yy + 0.5
    xc = xx + 0.5
    cx = w / 2
    r = max(1.5, 0.11 * h)
    head = (xc - cx) ** 2 + (yc - r) ** 2 <= r**2 + 0.25
    head |= (yy == 0) & (np.abs(xc - cx) <= max(0.5, r / 2))
    torso_w = max(2.0, 0.55 * w)
    top, bot = 1.8 * r, 0.62 * h
    rad = min(torso_w / 2, 0.08 * h)
    tx = np.abs(xc - cx) - (torso_w / 2 - rad)
    ty = np.maximum(top + rad - yc, yc - (bot - rad))
    torso = (np.clip(tx, 0, None) ** 2 + np.clip(ty, 0, None) ** 2 <= rad**2) & (
        (np.abs(xc - cx) <= torso_w / 2) & (yc >= top) & (yc <= bot)
    )
    arm_w = max(1.0, 0.12 * w)
    arms = (yc >= top + 0.5) & (yc <= top + 0.42 * h) & (np.abs(xc - cx) >= w / 2 - arm_w)
    leg_w = max(1.0, 0.2 * w)
    gap = max(0.5, 0.08 * w)
    legs = (yc >= bot - 1) & (np.abs(xc - cx) >= gap) & (np.abs(xc - cx) <= gap + leg_w)
    return head | torso | arms | legs


def _texture(rng, H, W, cells: int = 8) -> np.ndarray:
    coarse = rng.random((cells + 1, cells + 1))
    ys = np.linspace(0, cells, H)
    xs = np.linspace(0, cells, W)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    return (1 - fy) * ((1 - fx) * c00 + fx * c01) + fy * ((1 - fx) * c10 + fx * c11)


def _draw_shift(cfg: SceneConfig, rng) -> tuple:
    if cfg.fixed_shift is not None:
        return tuple(int(v) for v in cfg.fixed_shift)
    lo, hi = cfg.shift_range
    mag = int(rng.integers(lo, hi + 1))
    sign = 1 if rng.random() < 0.5 else -1
    if cfg.shift_axis == "x":
        return sign * mag, 0
    if cfg.shift_axis == "y":
        return 0, sign * mag
    other = int(rng.integers(-mag, mag + 1))
    return (sign * mag, other) if rng.random() < 0.5 else (other, sign * mag)


def _overlaps(box, others, margin: int = 1) -> bool:
    x, y, w, h = box
    for ox, oy, ow, oh in others:
        if x < ox + ow + margin and ox < x + w + margin and y < oy + oh + margin and oy < y + h + margin:
            return True
    return False


def _gt(box_px, H, W, identity, cfg_occlusion="none") -> GroundTruthInstance:
    x, y, w, h = box_px
    return GroundTruthInstance(
        ((x + w / 2) / W, (y + h / 2) / H, w / W, h / H),
        {"height_px": float(h), "occlusion": cfg_occlusion, "identity": int(identity)},
    )


def generate_scene(cfg: SceneConfig) -> ScenePair:
    rng = np.random.default_rng(cfg.rng_seed)
    H, W = cfg.image_size
    night = bool(rng.random() < cfg.night_prob)
    shift = _draw_shift(cfg, rng)

    # backgrounds in [0, 1]
    tint = rng.uniform(0.3, 1.0, size=3)
    level = rng.uniform(0.45, 0.75) if not night else rng.uniform(0.08, 0.2)
    bg_v = level * (0.6 + 0.4 * _texture(rng, H, W))[..., None] * tint[None, None, :]
    bg_v = bg_v + 0.15 * level * (_texture(rng, H, W, 4)[..., None] - 0.5)
    bg_t = 0.12 + 0.12 * _texture(rng, H, W, 6)
    img_v = bg_v.copy()
    img_t = bg_t.copy()

    n_target = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
    placed_v, placed_t, gts_v, gts_t, labels = [], [], [], [], []
    contrast = cfg.night_contrast if night else cfg.day_contrast
    for _ in range(n_target):
        # visibility and size are drawn once so rejections cannot skew their frequencies
        vis = VISIBILITY[int(rng.choice(3, p=cfg.visibility_probs))]
        h = int(rng.integers(cfg.height_range[0], cfg.height_range[1] + 1))
        w = max(3, int(round(h * rng.uniform(*cfg.aspect_range))))
        jx, jy = (
            rng.integers(-cfg.instance_jitter, cfg.instance_jitter + 1, size=2)
            if cfg.instance_jitter
            else (0, 0)
        )
        dx, dy = shift[0] + int(jx), shift[1] + int(jy)
        in_v = vis in ("both", "V-only")
        in_t = vis in ("both", "T-only")
        for _ in range(cfg.max_retries):
            x = int(rng.integers(0, W - w + 1))
            y = int(rng.integers(0, H - h + 1))
            box_v = (x, y, w, h)
            box_t = (x + dx, y + dy, w, h) if vis == "both" else (x, y, w, h)
            if in_t and not (0 <= box_t[0] and box_t[0] + w <= W and 0 <= box_t[1] and box_t[1] + h <= H):
                continue
            # keep every figure clear of every other in both frames
            if not (_overlaps(box_v, placed_v + placed_t) or _overlaps(box_t, placed_v + placed_t)):
                break
        else:
            continue
        identity = len(labels)
        mask = figure_mask(h, w)
        if in_v:
            color = rng.uniform(0.0, 1.0, size=3)
            if not night:
                # push the figure colour away from the local background
                local = img_v[y : y + h, x : x + w].mean(axis=(0, 1))
                color = np.where(local > 0.5, color * 0.35, 0.65 + color * 0.35)
            else:
                color = 0.3 + 0.25 * color
            region = img_v[y : y + h, x : x + w]
            region[mask] = (1 - contrast) * region[mask] + contrast * color[None, :]
            gts_v.append(_gt(box_v, H, W, identity))
            placed_v.append(box_v)
        if in_t:
            tx, ty = box_t[0], box_t[1]
            heat = cfg.thermal_contrast * rng.uniform(0.8, 1.1)
            region = img_t[ty : ty + h, tx : tx + w]
            grad = 0.9 + 0.1 * np.linspace(1, 0, h)[:, None] * np.ones((1, w))
            region[mask] = region[mask] + heat * grad[mask]
            gts_t.append(_gt(box_t, H, W, identity))
            placed_t.append(box_t)
        labels.append(vis)

    noise_v = cfg.night_noise if night else cfg.day_noise
    img_v = img_v + rng.normal(0, noise_v, size=img_v.shape)
    img_t = img_t + rng.normal(0, cfg.thermal_noise, size=img_t.shape)
    to_u8 = lambda a: np.clip(np.round(a * 255), 0, 255).astype(np.uint8)  # noqa: E731
    return ScenePair(
        to_u8(img_v),
        to_u8(img_t)[..., None],
        gts_v,
        gts_t,
        {"seed": int(cfg.rng_seed), "shift": list(shift), "night": night, "visibility": labels},
    )


def generate_split(cfg: SceneConfig, count: int, seed: int) -> list:
    """``count`` scenes whose seeds derive from ``seed`` (one stream per scene)."""
    seeds = np.random.SeedSequence(seed).generate_state(count)
    out = []
    for i, s in enumerate(seeds):
        scene = generate_scene(_with_seed(cfg, int(s)))
        scene.metadata["image_id"] = f"{i:05d}"
        out.append(scene)
    return out


def _with_seed(cfg: SceneConfig, seed: int) -> SceneConfig:
    d = asdict(cfg)
    d["rng_seed"] = seed
    return SceneConfig(**d)


# -- serialization ---------------------------------------------------------


def _record(image_id: str, g: GroundTruthInstance) -> dict:
    cx, cy, w, h = g.box
    return {
        "image_id": image_id,
        "cx": cx,
        "cy": cy,
        "w": w,
        "h": h,
        "height_px": g.attributes.get("height_px"),
        "occlusion": g.attributes.get("occlusion", "none"),
        "identity": g.attributes.get("identity"),
    }


def write_dataset(scenes, root, split: str = "train") -> Path:
    base = Path(root) / split
    for m in MODALITY_DIRS.values():
        (base / m).mkdir(parents=True, exist_ok=True)
    with open(base / "annotations_visible.jsonl", "w") as fv, open(
        base / "annotations_thermal.jsonl", "w"
    ) as ft, open(base / "scenes.jsonl", "w") as fs:
        for i, sc in enumerate(scenes):
            image_id = sc.metadata.get("image_id", f"{i:05d}")
            Image.fromarray(sc.image_v, mode="RGB").save(base / "visible" / f"{image_id}.ppm")
            Image.fromarray(sc.image_t[..., 0], mode="L").save(base / "thermal" / f"{image_id}.pgm")
            for g in sc.gts_v:
                fv.write(json.dumps(_record(image_id, g)) + "\n")
            for g in sc.gts_t:
                ft.write(json.dumps(_record(image_id, g)) + "\n")
            fs.write(json.dumps({"image_id": image_id, **sc.metadata}) + "\n")
    return base


REQUIRED = ("image_id", "cx", "cy", "w", "h", "height_px", "occlusion", "identity")


def read_annotations(path) -> dict:
    """JSON-lines annotations -> image_id -> list of GroundTruthInstance."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing annotation file {path}")
    out: dict = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                missing = [k for k in REQUIRED if k not in rec]
                if missing:
                    raise KeyError(", ".join(missing))
                g = GroundTruthInstance(
                    (rec["cx"], rec["cy"], rec["w"], rec["h"]),
                    {
                        "height_px": rec["height_px"],
                        "occlusion": rec["occlusion"],
                        "identity": rec["identity"],
                    },
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetFormatError(f"{path}:{lineno}: malformed record ({exc})") from None
            out.setdefault(str(rec["image_id"]), []).append(g)
    return out


def read_dataset(root, split: str = "train") -> list:
    base = Path(root) / split
    ann_v = read_annotations(base / "annotations_visible.jsonl")
    ann_t = read_annotations(base / "annotations_thermal.jsonl")
    meta_path = base / "scenes.jsonl"
    if not meta_path.is_file():
        raise FileNotFoundError(f"missing scene index {meta_path}")
    scenes = []
    with open(meta_path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                meta = json.loads(line)
                image_id = str(meta["image_id"])
            except (ValueError, KeyError) as exc:
                raise DatasetFormatError(f"{meta_path}:{lineno}: malformed record ({exc})") from None
            img_v = np.asarray(Image.open(base / "visible" / f"{image_id}.ppm").convert("RGB"))
            img_t = np.asarray(Image.open(base / "thermal" / f"{image_id}.pgm").convert("L"))[..., None]
            scenes.append(ScenePair(img_v, img_t, ann_v.get(image_id, []), ann_t.get(image_id, []), meta))
    return scenes


KAIST_OCCLUSION = {0: "none", 1: "partial", 2: "heavy"}


def convert_kaist_annotation(text: str, image_id: str, image_size: tuple, labels=("person",)) -> list:
    """KAIST/bbGt text rows (``person x y w h occ ...``) -> annotation records."""
    H, W = image_size
    records = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("%"):
            continue
        parts = line.split()
        if len(parts) < 5:
            raise DatasetFormatError(f"{image_id}:{lineno}: expected 'label x y w h ...'")
        if parts[0] not in labels:
            continue
        try:
            x, y, w, h = (float(v) for v in parts[1:5])
            occ = int(parts[5]) if len(parts) > 5 else 0
        except ValueError as exc:
            raise DatasetFormatError(f"{image_id}:{lineno}: {exc}") from None
        records.append(
            {
                "image_id": image_id,
                "cx": (x + w / 2) / W,
                "cy": (y + h / 2) / H,
                "w": w / W,
                "h": h / H,
                "height_px": h,
                "occlusion": KAIST_OCCLUSION.get(occ, "heavy"),
                "identity": len(records),
            }
        )
    return records
