import json

import pytest
import torch

from omniqa.checkpoint import META_FILE, PARAMS_FILE, Checkpoint
from omniqa.config import ModelConfig, RunConfig
from omniqa.errors import CheckpointError, ConfigError
from omniqa.model import QualityModel
from omniqa.sampling import SamplerConfig


def small_config():
    model = ModelConfig(backbone_channels=(4, 8, 16, 32, 32), input_side=64, k_patches=3, embed_dim=16)
    return RunConfig(sampler=SamplerConfig(k=3, network_side=64), model=model)


@pytest.fixture
def saved(tmp_path):
    cfg = small_config()
    model = QualityModel(cfg.model)
    with torch.no_grad():
        model.head.fc.bias.fill_(0.375)
    ckpt = Checkpoint.from_model(model, cfg, epoch=4, note="x")
    return model, ckpt, ckpt.save(tmp_path / "ck")


class TestCheckpoint:
    def test_files(self, saved):
        _, _, path = saved
        assert (path / PARAMS_FILE).is_file() and (path / META_FILE).is_file()
        meta = json.loads((path / META_FILE).read_text())
        assert meta["format_version"] == 1 and meta["epoch"] == 4

    def test_round_trip_is_byte_stable(self, saved, tmp_path):
        _, _, path = saved
        again = Checkpoint.load(path).save(tmp_path / "again")
        for name in (PARAMS_FILE, META_FILE):
            assert (path / name).read_bytes() == (again / name).read_bytes()

    def test_parameters_restored(self, saved):
        model, _, path = saved
        loaded = Checkpoint.load(path)
        rebuilt = loaded.build_model()
        for name, t in model.state_dict().items():
            assert torch.equal(rebuilt.state_dict()[name], t), name
        assert loaded.epoch == 4 and loaded.extra == {"note": "x"}
        assert loaded.config.to_dict() == small_config().to_dict()
        assert torch.equal(loaded.rng_state, saved[1].rng_state)

    def test_same_predictions(self, saved):
        model, _, path = saved
        x = torch.rand(2, 3, 3, 64, 64)
        model.eval()
        with torch.no_grad():
            torch.testing.assert_close(Checkpoint.load(path).build_model()(x), model(x), atol=0, rtol=0)

    def test_strict_mismatch(self, saved):
        _, ckpt, _ = saved
        params = dict(ckpt.params)
        params.pop("head.fc.bias")
        with pytest.raises(CheckpointError):
            Checkpoint(params, ckpt.config).build_model()
        other = small_config().with_overrides(model={"embed_dim": 24})
        with pytest.raises(CheckpointError):
            Checkpoint(ckpt.params, other).build_model()

    def test_format_version(self, saved):
        _, _, path = saved
        meta = json.loads((path / META_FILE).read_text())
        meta["format_version"] = 99
        (path / META_FILE).write_text(json.dumps(meta))
        with pytest.raises(CheckpointError, match="format"):
            Checkpoint.load(path)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(CheckpointError):
            Checkpoint.load(tmp_path / "nothing")

    def test_id_tracks_config(self, saved):
        _, ckpt, _ = saved
        assert ckpt.checkpoint_id.endswith("-e4")
        assert ckpt.checkpoint_id.split("-")[0] == small_config().digest()


class TestConfigFile:
    def test_round_trip(self, tmp_path):
        cfg = small_config().with_overrides(train={"lr": 3e-4}, loss={"gamma": 2})
        cfg.save(tmp_path / "c.ini")
        back = RunConfig.load(tmp_path / "c.ini")
        assert back.to_dict() == cfg.to_dict()
        assert back.digest() == cfg.digest()

    def test_unknown_key(self, tmp_path):
        (tmp_path / "c.ini").write_text("[train]\nlrr = 0.1\n")
        with pytest.raises(ConfigError, match="lrr"):
            RunConfig.load(tmp_path / "c.ini")
