"""Experiment configuration as one flat key-value document."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import toml

FUSION_STRATEGIES = ("early_concat", "late_concat", "loosely_coupled")

# fields that determine the parameter layout of a checkpoint
MODEL_FIELDS = (
    "d_model", "levels", "heads", "points", "queries", "enc_layers", "dec_layers",
    "ffn_dim", "stem_channels", "fusion_strategy", "channels_v", "channels_t",
)


@dataclass
class ExperimentConfig:
    # model
    d_model: int = 32
    levels: int = 4
    heads: int = 8
    points: int = 4
    queries: int = 20
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 64
    stem_channels: int = 16
    channels_v: int = 3
    channels_t: int = 1
    fusion_strategy: str = "loosely_coupled"
    # optimisation
    mbo_enabled: bool = True
    aux_loss: bool = True
    invert_dynamic_weights: bool = False
    cost_cls: float = 1.0
    cost_l1: float = 1.0
    cost_giou: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    lr: float = 1e-4
    weight_decay: float = 1e-4
    lr_drop_fraction: float = 0.5
    lr_drop_factor: float = 0.1
    clip_norm: float = 0.1
    epochs: int = 20
    batch_size: int = 4
    val_every: int = 1
    # data
    data_dir: str = "data"
    train_split: str = "train"
    test_split: str = "test"
    eval_filter: str = "all"
    num_train: int = 500
    num_test: int = 100
    image_h: int = 64
    image_w: int = 64
    max_instances: int = 3
    shift_min: int = 0
    shift_max: int = 6
    shift_axis: str = "x"
    vis_both: float = 0.7
    vis_v_only: float = 0.15
    vis_t_only: float = 0.15
    night_prob: float = 0.5
    data_seed: int = 0
    # run
    seed: int = 0
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.fusion_strategy not in FUSION_STRATEGIES:
            raise ValueError(f"fusion_strategy must be one of {FUSION_STRATEGIES}")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def model_dict(self) -> dict:
        return {k: getattr(self, k) for k in MODEL_FIELDS}

    def digest(self) -> str:
        """SHA-256 over the architecture fields, stable across runs."""
        return hashlib.sha256(toml.dumps(self.model_dict()).encode()).hexdigest()

    def dumps(self) -> str:
        return toml.dumps(asdict(self))

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        data = toml.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.loads(Path(path).read_text())

    def scene_config(self, **overrides):
        from .synthscene import SceneConfig

        kw = dict(
            image_size=(self.image_h, self.image_w),
            max_instances=self.max_instances,
            shift_range=(self.shift_min, self.shift_max),
            shift_axis=self.shift_axis,
            visibility_probs=(self.vis_both, self.vis_v_only, self.vis_t_only),
            night_prob=self.night_prob,
        )
        kw.update(overrides)
        return SceneConfig(**kw)
