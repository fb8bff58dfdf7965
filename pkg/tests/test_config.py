import pytest

from msdetr.config import ExperimentConfig
from msdetr.numeric import DomainError


def test_defaults_describe_the_desk_scale_model():
    cfg = ExperimentConfig()
    assert (cfg.enc_layers, cfg.dec_layers, cfg.queries, cfg.d_model) == (2, 2, 20, 32)
    assert (cfg.num_train, cfg.num_test, cfg.image_h, cfg.image_w, cfg.max_instances) == (500, 100, 64, 64, 3)
    assert (cfg.shift_min, cfg.shift_max) == (0, 6)
    assert cfg.epochs == 20 and cfg.mbo_enabled


def test_toml_round_trip(tmp_path):
    cfg = ExperimentConfig(lr=2e-4, fusion_strategy="late_concat", shift_axis="xy")
    cfg.save(tmp_path / "c.toml")
    assert ExperimentConfig.load(tmp_path / "c.toml") == cfg


def test_unknown_keys_and_bad_values_rejected():
    with pytest.raises(ValueError, match="unknown"):
        ExperimentConfig.loads("d_modle = 8\n")
    with pytest.raises(ValueError):
        ExperimentConfig(fusion_strategy="middle")
    with pytest.raises(ValueError):
        ExperimentConfig(d_model=30, heads=8)


def test_digest_tracks_architecture_only():
    a = ExperimentConfig()
    assert a.digest() == ExperimentConfig(lr=1.0, seed=4, epochs=1).digest()
    assert a.digest() != ExperimentConfig(queries=30).digest()
    assert len(a.digest()) == 64


def test_scene_config_mapping():
    sc = ExperimentConfig(shift_min=6, shift_max=10, vis_both=0.5, vis_v_only=0.25, vis_t_only=0.25).scene_config()
    assert sc.shift_range == (6, 10) and sc.visibility_probs == (0.5, 0.25, 0.25)
    assert sc.image_size == (64, 64)
    with pytest.raises(DomainError):
        ExperimentConfig(shift_max=16).scene_config()
