import struct

import pytest
import torch

from msdetr import checkpoint
from msdetr.checkpoint import MAGIC, CheckpointError
from msdetr.config import ExperimentConfig
from msdetr.decoder import build_model

SMALL = ExperimentConfig(d_model=16, heads=2, levels=2, points=2, queries=5, ffn_dim=16, stem_channels=8)


def test_round_trip_is_bit_exact(tmp_path):
    model = build_model(SMALL, seed=3)
    path = tmp_path / "m.bin"
    checkpoint.save(path, model, SMALL)
    cfg, state = checkpoint.load(path, SMALL)
    assert cfg is SMALL
    ref = model.state_dict()
    assert list(state) == list(ref)
    for k in ref:
        assert state[k].shape == ref[k].shape
        assert torch.equal(state[k], ref[k].to(state[k].dtype))
    fresh = build_model(SMALL, seed=99)
    fresh.load_state_dict(state)
    checkpoint.save(tmp_path / "again.bin", fresh, SMALL)
    assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()


def test_load_without_config_returns_stored_config(tmp_path):
    cfg = SMALL.replace(lr=3e-4, seed=12)
    checkpoint.save(tmp_path / "m.bin", build_model(cfg, 0), cfg)
    stored, _ = checkpoint.load(tmp_path / "m.bin")
    assert stored == cfg


def test_header_layout():
    data = checkpoint.encode({"w": torch.ones(2, 3, dtype=torch.float64)}, SMALL)
    assert data.startswith(MAGIC)
    n = struct.unpack("<I", data[len(MAGIC) : len(MAGIC) + 4])[0]
    assert data[len(MAGIC) + 4 : len(MAGIC) + 4 + n].decode() == SMALL.digest()


def test_digest_mismatch_is_an_error(tmp_path):
    checkpoint.save(tmp_path / "m.bin", build_model(SMALL, 0), SMALL)
    with pytest.raises(CheckpointError, match="digest"):
        checkpoint.load(tmp_path / "m.bin", SMALL.replace(d_model=32))
    # training-only fields do not change the architecture digest
    checkpoint.load(tmp_path / "m.bin", SMALL.replace(lr=0.5, epochs=3))


def test_corrupt_files_rejected():
    data = checkpoint.encode({"w": torch.zeros(4, dtype=torch.float64)}, SMALL)
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.decode(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError, match="truncated"):
        checkpoint.decode(data[:-3])
    with pytest.raises(CheckpointError, match="trailing"):
        checkpoint.decode(data + b"\0")


def test_scalar_tensor_round_trip():
    state = {"s": torch.tensor(2.5, dtype=torch.float64), "e": torch.zeros(0, 3, dtype=torch.float64)}
    _, _, back = checkpoint.decode(checkpoint.encode(state, SMALL))
    assert back["s"].shape == () and back["s"].item() == 2.5
    assert back["e"].shape == (0, 3)
