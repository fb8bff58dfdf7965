"""Training, evaluation, fusion ablation and point dumps."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .config import ExperimentConfig
from .decoder import build_model, infer
from .losses import BRANCHES, SUM_ORDER, CostCoeffs, branch_loss, cxcywh_to_xyxy, dynamic_weights, total_loss
from .matching import select_permutation
from .metrics import (
    FILTERS,
    EvalConfig,
    average_precision,
    evaluate_images,
    fppi_mr_curve,
    log_average_miss_rate,
    write_curve,
    write_detections,
    write_summary,
)
from .msca import point_dump_rows
from .numeric import DTYPE
from .synthscene import generate_split, read_dataset, write_dataset

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "total_loss", "L_F", "L_V", "L_T", "val_mr2")
LAMBDA_FIELDS = ("lambda_V", "lambda_F", "lambda_T")


class TrainingDiverged(RuntimeError):
    """A training step produced a non-finite loss."""


# -- data ------------------------------------------------------------------


@dataclass
class SceneBatch:
    """Scenes as model-ready tensors plus evaluation ground truth."""

    image_v: torch.Tensor  # (S, C_v, H, W) in [0, 1]
    image_t: torch.Tensor  # (S, C_t, H, W)
    targets: list  # per scene (T, 4) normalized cx, cy, w, h
    attrs: list  # per scene list of attribute dicts
    ids: list
    size: tuple  # (H, W)

    def __len__(self) -> int:
        return len(self.ids)

    def gt_pixels(self) -> list:
        """Per scene ``(corner boxes in pixels, attrs)`` for the metrics module."""
        H, W = self.size
        scale = np.array([W, H, W, H], dtype=np.float64)
        return [(cxcywh_to_xyxy(t).numpy() * scale, a) for t, a in zip(self.targets, self.attrs)]


def scene_batch(scenes) -> SceneBatch:
    v = np.stack([s.image_v for s in scenes]).astype(np.float64) / 255.0
    t = np.stack([s.image_t for s in scenes]).astype(np.float64) / 255.0
    targets, attrs = [], []
    for s in scenes:
        gts = s.targets()
        targets.append(torch.tensor([g.box for g in gts], dtype=DTYPE).reshape(-1, 4))
        attrs.append([g.attributes for g in gts])
    return SceneBatch(
        torch.from_numpy(v).permute(0, 3, 1, 2).contiguous(),
        torch.from_numpy(t).permute(0, 3, 1, 2).contiguous(),
        targets,
        attrs,
        [s.metadata.get("image_id", f"{i:05d}") for i, s in enumerate(scenes)],
        tuple(scenes[0].image_v.shape[:2]),
    )


def generate_data(cfg: ExperimentConfig) -> tuple[list, list]:
    """Train and test scenes from ``cfg.data_seed``; the two splits use disjoint seed streams."""
    scfg = cfg.scene_config()
    train = generate_split(scfg, cfg.num_train, [cfg.data_seed, 0])
    test = generate_split(scfg, cfg.num_test, [cfg.data_seed, 1])
    return train, test


def load_data(cfg: ExperimentConfig) -> tuple[list, list]:
    """Read both splits from ``cfg.data_dir`` when present, otherwise generate them."""
    root = Path(cfg.data_dir)
    if (root / cfg.train_split).is_dir() and (root / cfg.test_split).is_dir():
        return read_dataset(root, cfg.train_split), read_dataset(root, cfg.test_split)
    return generate_data(cfg)


def gen_data(cfg: ExperimentConfig, out_dir=None) -> Path:
    root = Path(out_dir or cfg.data_dir)
    train, test = generate_data(cfg)
    write_dataset(train, root, cfg.train_split)
    write_dataset(test, root, cfg.test_split)
    return root


# -- loss ------------------------------------------------------------------


def cost_coeffs(cfg: ExperimentConfig) -> CostCoeffs:
    return CostCoeffs(cfg.cost_cls, cfg.cost_l1, cfg.cost_giou, cfg.focal_alpha, cfg.focal_gamma)


def trained_branches(model, cfg: ExperimentConfig) -> tuple:
    return model.branches if cfg.mbo_enabled else ("F",)


def batch_loss(out, targets, cfg: ExperimentConfig, branches) -> tuple[torch.Tensor, dict]:
    """Summed loss over the images of a batch.

    Every decoder layer reuses the final layer's shared assignment and
    instance weights. Returns ``(total, stats)`` where stats holds the
    per-branch sums and the summed lambdas.
    """
    coeffs = cost_coeffs(cfg)
    per_branch = {b: out.preds[b][0][0].new_zeros(()) for b in branches}
    lam_sum = np.zeros(len(branches))
    for i, gt in enumerate(targets):
        final = {b: (out.preds[b][-1][0][i], out.preds[b][-1][1][i]) for b in branches}
        plan = select_permutation(gt, final, coeffs)
        lam = None
        if cfg.mbo_enabled:
            lam = dynamic_weights(plan.costs, invert=cfg.invert_dynamic_weights)
            lam_sum += lam.sum(dim=0).numpy()
        for b in branches:
            col = None if lam is None else lam[:, plan.branches.index(b)]
            for prob, boxes in out.preds[b]:
                matched, unmatched = branch_loss(prob[i], boxes[i], gt, plan.sigma_hat, col, coeffs)
                per_branch[b] = per_branch[b] + matched + unmatched
    zero = next(iter(per_branch.values())).new_zeros(())
    total = total_loss(*(per_branch.get(b, zero) for b in SUM_ORDER))
    return total, {"branches": per_branch, "lambda_sum": dict(zip(branches, lam_sum))}


# -- training --------------------------------------------------------------


@dataclass
class TrainResult:
    model: torch.nn.Module
    rows: list
    log_path: Path
    checkpoint_path: Path


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def _diagnostic_dump(out_dir: Path, epoch: int, step: int, ids, stats, model) -> Path:
    path = out_dir / "divergence.json"
    norms = {n: float(p.detach().norm()) for n, p in model.named_parameters()}
    path.write_text(json.dumps({
        "epoch": epoch,
        "step": step,
        "image_ids": list(ids),
        "branch_losses": {b: v.item() for b, v in stats["branches"].items()},
        "parameter_norms": norms,
    }, indent=1))
    return path


def train(cfg: ExperimentConfig, train_scenes=None, test_scenes=None) -> TrainResult:
    """Train one model and write ``train_log.csv``, ``checkpoint.bin`` and ``config.toml`` to ``cfg.out_dir``."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if train_scenes is None or test_scenes is None:
        tr, te = load_data(cfg)
        train_scenes = tr if train_scenes is None else train_scenes
        test_scenes = te if test_scenes is None else test_scenes
    data = scene_batch(train_scenes)
    test = scene_batch(test_scenes) if len(test_scenes) else None

    model = build_model(cfg, seed=cfg.seed)
    branches = trained_branches(model, cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    drop_at = max(1, int(round(cfg.epochs * cfg.lr_drop_fraction)))
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, [drop_at], gamma=cfg.lr_drop_factor)
    gen = torch.Generator().manual_seed(cfg.seed)

    fields = LOG_FIELDS + (LAMBDA_FIELDS if cfg.mbo_enabled else ())
    rows = []
    log_path = out_dir / "train_log.csv"
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            order = torch.randperm(len(data), generator=gen)
            sums = {b: 0.0 for b in branches}
            lam = {b: 0.0 for b in branches}
            total_sum, instances = 0.0, 0
            for step, start in enumerate(range(0, len(data), cfg.batch_size)):
                idx = order[start : start + cfg.batch_size]
                targets = [data.targets[i] for i in idx]
                out = model(data.image_v[idx], data.image_t[idx])
                loss, stats = batch_loss(out, targets, cfg, branches)
                n = sum(len(t) for t in targets)
                if not torch.isfinite(loss):
                    dump = _diagnostic_dump(out_dir, epoch, step, [data.ids[i] for i in idx], stats, model)
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}; see {dump}")
                opt.zero_grad()
                (loss / max(1, n)).backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
                opt.step()
                total_sum += loss.item()
                instances += n
                for b in branches:
                    sums[b] += stats["branches"][b].item()
                    lam[b] += stats["lambda_sum"][b]
            sched.step()
            denom = max(1, instances)
            val = None
            if test is not None and (epoch % cfg.val_every == 0 or epoch == cfg.epochs):
                val = evaluate_model(model, test, "F", cfg)["F"]["MR2"]
            row = {
                "epoch": epoch,
                "total_loss": total_sum / denom,
                **{f"L_{b}": (sums[b] / denom if b in sums else None) for b in ("F", "V", "T")},
                "val_mr2": val,
            }
            if cfg.mbo_enabled:
                row.update({f"lambda_{b}": (lam[b] / denom if b in lam else None) for b in BRANCHES})
            rows.append(row)
            writer.writerow([row["epoch"]] + [_fmt(row[f]) for f in fields[1:]])
            fh.flush()
            log.info("epoch %d loss %.4f val_mr2 %s", epoch, row["total_loss"], val)
    cfg.save(out_dir / "config.toml")
    ckpt = out_dir / "checkpoint.bin"
    checkpoint.save(ckpt, model, cfg)
    return TrainResult(model, rows, log_path, ckpt)


def load_model(path, cfg: ExperimentConfig | None = None):
    """Rebuild a model from a checkpoint; ``cfg`` (if given) must match its digest."""
    cfg, state = checkpoint.load(path, cfg)
    model = build_model(cfg)
    model.load_state_dict(state)
    model.eval()
    return model, cfg


# -- evaluation ------------------------------------------------------------


def predict(model, data: SceneBatch, branch: str, batch_size: int = 16) -> list:
    """Per scene ``(corner boxes in pixels, scores)`` from every slot of ``branch``."""
    H, W = data.size
    scale = torch.tensor([W, H, W, H], dtype=DTYPE)
    out = []
    for start in range(0, len(data), batch_size):
        sl = slice(start, start + batch_size)
        for det in infer(data.image_v[sl], data.image_t[sl], model, branch):
            out.append(((cxcywh_to_xyxy(det.boxes) * scale).numpy(), det.prob.numpy()))
    return out


def eval_config(cfg: ExperimentConfig) -> EvalConfig:
    if cfg.eval_filter not in FILTERS:
        raise ValueError(f"unknown eval filter {cfg.eval_filter!r}; choose from {sorted(FILTERS)}")
    return EvalConfig(filter=FILTERS[cfg.eval_filter])


def score_detections(dets, gts, ecfg: EvalConfig) -> tuple[dict, object]:
    curve = fppi_mr_curve(evaluate_images(dets, gts, ecfg))
    summary = {"MR2": log_average_miss_rate(curve, ecfg), **average_precision(dets, gts, cfg=ecfg)}
    return summary, curve


def evaluate_model(model, data: SceneBatch, branch: str, cfg: ExperimentConfig, out_dir=None) -> dict:
    """MR⁻² and AP per branch; ``branch="all"`` scores V, T and F from one model.

    With ``out_dir`` each branch gets a detection dump, a curve CSV and a
    summary CSV, and ``summary.csv`` collects one row per branch.
    """
    branches = ("V", "T", "F") if branch == "all" else (branch,)
    ecfg = eval_config(cfg)
    gts = data.gt_pixels()
    results = {}
    for b in branches:
        dets = predict(model, data, b)
        results[b], curve = score_detections(dets, gts, ecfg)
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            write_detections(out / f"detections_{b}.csv", (
                (image_id, *box, s) for image_id, (boxes, scores) in zip(data.ids, dets)
                for box, s in zip(boxes, scores)
            ))
            write_curve(out / f"curve_{b}.csv", curve)
            write_summary(out / f"summary_{b}.csv", results[b])
    if out_dir is not None:
        with open(Path(out_dir) / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["branch", "filter", "MR2", "AP", "AP50", "AP75"])
            for b, r in results.items():
                w.writerow([b, cfg.eval_filter] + [repr(r[k]) for k in ("MR2", "AP", "AP50", "AP75")])
    return results


def evaluate(checkpoint_path, cfg: ExperimentConfig, branch: str = "F", scenes=None, out_dir=None) -> dict:
    """Load a checkpoint (digest-checked against ``cfg``) and score it on the test split."""
    model, cfg = load_model(checkpoint_path, cfg)
    if scenes is None:
        scenes = load_data(cfg)[1]
    return evaluate_model(model, scene_batch(scenes), branch, cfg, out_dir)


# -- ablation --------------------------------------------------------------

ABLATION_VARIANTS = (
    ("early_concat", True),
    ("late_concat", True),
    ("loosely_coupled", False),
    ("loosely_coupled", True),
)


def ablate_fusion(cfg: ExperimentConfig, seeds, variants=ABLATION_VARIANTS, train_scenes=None,
                  test_scenes=None) -> list:
    """Train every (strategy, MBO) variant per seed on the same data; write ``ablation.csv``.

    Returns rows ``{strategy, mbo_enabled, seed, mr2}`` followed by one mean
    row per variant (seed ``"mean"``).
    """
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if train_scenes is None or test_scenes is None:
        train_scenes, test_scenes = load_data(cfg)
    test = scene_batch(test_scenes)
    rows = []
    for strategy, mbo in variants:
        for seed in seeds:
            run = cfg.replace(fusion_strategy=strategy, mbo_enabled=mbo, seed=seed,
                              out_dir=str(out_dir / f"{strategy}{'_mbo' if mbo else ''}_seed{seed}"))
            result = train(run, train_scenes, test_scenes)
            mr = evaluate_model(result.model, test, "F", run)["F"]["MR2"]
            rows.append({"strategy": strategy, "mbo_enabled": mbo, "seed": seed, "mr2": mr})
    for strategy, mbo in variants:
        vals = [r["mr2"] for r in rows if r["strategy"] == strategy and r["mbo_enabled"] == mbo
                and r["seed"] != "mean"]
        rows.append({"strategy": strategy, "mbo_enabled": mbo, "seed": "mean", "mr2": float(np.mean(vals))})
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["strategy", "mbo_enabled", "seed", "mr2"])
        w.writeheader()
        for r in rows:
            w.writerow({**r, "mr2": repr(r["mr2"])})
    return rows


# -- point dumps -----------------------------------------------------------

POINT_FIELDS = ("query_id", "modality", "head", "level", "point", "x_px", "y_px", "weight", "in_bounds")


def dump_points(model, scene, top_q: int = 3, weights: str = "joint", layer: int = -1, path=None) -> list:
    """Sampling points of the ``top_q`` highest-scoring fusion queries for one scene."""
    if weights not in ("joint", "modal"):
        raise ValueError("weights must be 'joint' or 'modal'")
    data = scene_batch([scene])
    model.eval()
    with torch.no_grad():
        out = model(data.image_v, data.image_t)
    prob = out.final("F")[0][0]
    top_q = min(top_q, prob.shape[0])
    queries = torch.argsort(prob, descending=True, stable=True)[:top_q].tolist()
    spec = out.specs[layer]
    rows = list(point_dump_rows(spec, data.size, out.pyramids[0].shapes, queries, 0, weights))
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(POINT_FIELDS)
            for r in rows:
                w.writerow([r[0], r[1], r[2], r[3], r[4], repr(r[5]), repr(r[6]), repr(r[7]), int(r[8])])
    return rows

