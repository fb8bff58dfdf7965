import csv
import json

import numpy as np
import pytest
import torch

from msdetr import harness
from msdetr.cli import main
from msdetr.config import ExperimentConfig
from msdetr.decoder import build_model
from msdetr.harness import LAMBDA_FIELDS, LOG_FIELDS, POINT_FIELDS, batch_loss, scene_batch
from msdetr.metrics import match_detections

TINY = dict(d_model=16, heads=2, levels=2, points=2, queries=5, ffn_dim=16, stem_channels=8,
            num_train=8, num_test=4, epochs=2, batch_size=4, lr=1e-3)


def tiny(tmp_path, **kw):
    return ExperimentConfig(**{**TINY, "out_dir": str(tmp_path / "run"), "data_dir": str(tmp_path / "data"), **kw})


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def data():
    cfg = ExperimentConfig(**TINY)
    return harness.generate_data(cfg)


def test_scene_batch_tensors(data):
    b = scene_batch(data[0])
    assert b.image_v.shape == (8, 3, 64, 64) and b.image_t.shape == (8, 1, 64, 64)
    assert 0 <= b.image_v.min() and b.image_v.max() <= 1
    assert len(b.targets) == 8 and all(t.shape[1] == 4 for t in b.targets)
    boxes, attrs = b.gt_pixels()[0]
    assert boxes.shape == (len(attrs), 4)


def test_split_seeds_are_disjoint_and_reproducible(data):
    train2, test2 = harness.generate_data(ExperimentConfig(**TINY))
    assert np.array_equal(data[0][0].image_v, train2[0].image_v)
    assert not np.array_equal(data[0][0].image_v, data[1][0].image_v)


def test_smoke_run_loss_decreases(tmp_path):
    cfg = tiny(tmp_path, num_train=10, num_test=4, epochs=2)
    result = harness.train(cfg)
    rows = read_csv(result.log_path)
    assert tuple(rows[0]) == LOG_FIELDS + LAMBDA_FIELDS
    assert [r[0] for r in rows[1:]] == ["1", "2"]
    losses = [float(r[1]) for r in rows[1:]]
    assert losses[1] < losses[0]
    assert all(0 <= float(r[5]) <= 1 for r in rows[1:])
    lam = np.array([[float(x) for x in r[6:9]] for r in rows[1:]])
    np.testing.assert_allclose(lam.sum(axis=1), 1.0, atol=1e-9)
    assert (tmp_path / "run" / "config.toml").is_file()
    model, stored = harness.load_model(result.checkpoint_path)
    assert stored == cfg


def test_identical_seed_gives_identical_bytes(tmp_path, data):
    cfg = tiny(tmp_path, epochs=1)
    a = harness.train(cfg, *data)
    first = a.log_path.read_bytes(), a.checkpoint_path.read_bytes()
    b = harness.train(cfg, *data)
    assert (b.log_path.read_bytes(), b.checkpoint_path.read_bytes()) == first
    c = harness.train(cfg.replace(seed=1), *data)
    assert c.checkpoint_path.read_bytes() != first[1]


def test_without_mbo_only_fusion_is_trained(tmp_path, data):
    result = harness.train(tiny(tmp_path, epochs=1, mbo_enabled=False), *data)
    rows = read_csv(result.log_path)
    assert tuple(rows[0]) == LOG_FIELDS
    assert rows[1][3] == "" and rows[1][4] == "" and rows[1][2] != ""


def test_batch_loss_uses_one_assignment_for_all_branches(data):
    cfg = ExperimentConfig(**TINY)
    model = build_model(cfg, seed=0)
    b = scene_batch(data[0][:2])
    out = model(b.image_v, b.image_t)
    total, stats = batch_loss(out, b.targets, cfg, ("V", "F", "T"))
    assert total.item() == pytest.approx(sum(v.item() for v in stats["branches"].values()), rel=1e-12)
    n = sum(len(t) for t in b.targets)
    assert sum(stats["lambda_sum"].values()) == pytest.approx(n, abs=1e-9)


def test_evaluate_all_branches_writes_outputs(tmp_path, data):
    cfg = tiny(tmp_path, epochs=1)
    result = harness.train(cfg, *data)
    out = tmp_path / "eval"
    res = harness.evaluate(result.checkpoint_path, cfg, "all", data[1], out)
    assert set(res) == {"V", "T", "F"}
    summary = read_csv(out / "summary.csv")
    assert summary[0] == ["branch", "filter", "MR2", "AP", "AP50", "AP75"]
    assert [r[0] for r in summary[1:]] == ["V", "T", "F"]
    dets = read_csv(out / "detections_F.csv")
    assert len(dets) == len(data[1]) * cfg.queries
    assert read_csv(out / "curve_V.csv")[0] == ["threshold", "fppi", "miss_rate"]


def test_oracle_detector_reaches_the_floor(data):
    test = scene_batch(data[1])
    gts = test.gt_pixels()
    dets = [(boxes.copy(), np.ones(len(boxes))) for boxes, _ in gts]
    summary, _ = harness.score_detections(dets, gts, harness.eval_config(ExperimentConfig()))
    assert summary["MR2"] == pytest.approx(1e-6, rel=1e-12)
    assert summary["AP"] == 1.0
    for (boxes, _), (g, _) in zip(dets, gts):
        assert (match_detections(boxes, np.ones(len(boxes)), g).labels == 1).all()


def test_unknown_eval_filter_rejected():
    with pytest.raises(ValueError, match="filter"):
        harness.eval_config(ExperimentConfig(eval_filter="tall"))


def test_dump_points_rows(tmp_path, data):
    cfg = ExperimentConfig(**TINY)
    model = build_model(cfg, seed=0)
    path = tmp_path / "p.csv"
    rows = harness.dump_points(model, data[1][0], top_q=2, weights="modal", path=path)
    assert len(rows) == 2 * 2 * cfg.heads * cfg.levels * cfg.points
    lines = read_csv(path)
    assert tuple(lines[0]) == POINT_FIELDS and len(lines) == len(rows) + 1
    with pytest.raises(ValueError):
        harness.dump_points(model, data[1][0], weights="both")


def test_ablation_rows(tmp_path, data):
    cfg = tiny(tmp_path, epochs=1)
    variants = (("early_concat", True), ("loosely_coupled", True))
    rows = harness.ablate_fusion(cfg, [0], variants, *data)
    assert [(r["strategy"], r["seed"]) for r in rows] == [
        ("early_concat", 0), ("loosely_coupled", 0), ("early_concat", "mean"), ("loosely_coupled", "mean")]
    lines = read_csv(tmp_path / "run" / "ablation.csv")
    assert lines[0] == ["strategy", "mbo_enabled", "seed", "mr2"] and len(lines) == 5


def test_divergence_raises_with_dump(tmp_path, data, monkeypatch):
    real = harness.batch_loss
    calls = []

    def poisoned(*args):
        total, stats = real(*args)
        calls.append(1)
        return (total * float("nan") if len(calls) == 2 else total), stats

    monkeypatch.setattr(harness, "batch_loss", poisoned)
    with pytest.raises(harness.TrainingDiverged):
        harness.train(tiny(tmp_path, epochs=1), *data)
    dump = json.loads((tmp_path / "run" / "divergence.json").read_text())
    assert dump["epoch"] == 1 and dump["step"] == 1 and len(dump["image_ids"]) == 4


def test_cli_end_to_end(tmp_path, capsys):
    flags = ["--d-model", "16", "--heads", "2", "--levels", "2", "--points", "2", "--queries", "5",
             "--ffn-dim", "16", "--stem-channels", "8", "--num-train", "4", "--num-test", "2",
             "--data-dir", str(tmp_path / "data")]
    run = ["--out-dir", str(tmp_path / "run")]
    assert main(["gen-data", *flags]) == 0
    assert (tmp_path / "data" / "train" / "annotations_visible.jsonl").is_file()
    with pytest.raises(SystemExit):
        main(["train", *flags, *run, "--epochs", "1"])  # --seed is required
    assert main(["train", *flags, *run, "--epochs", "1", "--seed", "0", "--mbo-enabled", "false"]) == 0
    ckpt = str(tmp_path / "run" / "checkpoint.bin")
    assert main(["eval", *flags, *run, "--checkpoint", ckpt, "--branch", "all"]) == 0
    metrics = [json.loads(x) for x in (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()]
    assert [m["branch"] for m in metrics] == ["V", "T", "F"]
    assert main(["dump-points", *flags, *run, "--checkpoint", ckpt, "--top-q", "1"]) == 0
    assert (tmp_path / "run" / "points_joint.csv").is_file()
    out = capsys.readouterr().out
    assert "MR2" in out


def test_cli_grad_check(tmp_path, capsys):
    assert main(["grad-check", "--trials", "1", "--out-dir", str(tmp_path)]) == 0
    lines = read_csv(tmp_path / "grad_check.csv")
    assert lines[0] == ["check", "trial", "max_rel_error", "passed"]
    assert all(r[3] == "1" for r in lines[1:])
    assert "PASS" in capsys.readouterr().out


def test_scenes_from_disk_match_generated(tmp_path):
    cfg = tiny(tmp_path)
    harness.gen_data(cfg)
    tr, te = harness.load_data(cfg)
    gen_tr, _ = harness.generate_data(cfg)
    assert len(tr) == cfg.num_train and len(te) == cfg.num_test
    a, b = scene_batch(tr), scene_batch(gen_tr)
    assert torch.equal(a.image_v, b.image_v)
    assert all(torch.equal(x, y) for x, y in zip(a.targets, b.targets))
