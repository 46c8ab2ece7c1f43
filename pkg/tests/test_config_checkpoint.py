import struct

import numpy as np
import pytest
import torch

from hsfusion import checkpoint
from hsfusion.config import PRESETS, RunConfig, load_config, parse_pairs
from hsfusion.errors import CheckpointError, ConfigError


def test_full_scale_preset_defaults():
    cfg = RunConfig.for_preset("paper")
    assert (cfg.lambda_sere, cfg.mu, cfg.rho, cfg.eta) == (80, 100, 50, 40)
    assert (cfg.omega0, cfg.gamma0) == (0.5, 0.5)
    assert (cfg.lr, cfg.beta1) == (2e-4, 0.5)
    assert (cfg.epochs_cgfe, cfg.epochs_fusion) == (400, 400)
    assert (cfg.base_ch, cfg.unet_depth, cfg.frb_reduction) == (64, 7, 64)


def test_toy_preset():
    cfg = RunConfig.for_preset("toy")
    assert cfg.image_size == (128, 128)
    assert (cfg.base_ch, cfg.unet_depth, cfg.frb_reduction, cfg.epochs_cgfe) == (16, 3, 4, 50)
    assert set(PRESETS) == {"paper", "toy"}
    with pytest.raises(ConfigError):
        RunConfig.for_preset("huge")


def test_validation():
    with pytest.raises(ConfigError):
        RunConfig.for_preset("toy", image_size=(100, 128))
    with pytest.raises(ConfigError):
        RunConfig.for_preset("toy", frb_reduction=7)
    with pytest.raises(ConfigError):
        RunConfig.for_preset("toy", lr=0)
    with pytest.raises(ConfigError):
        RunConfig.for_preset("toy", mu=-1)
    with pytest.raises(ConfigError):
        RunConfig.for_preset("toy", ohem_thresh=1.5)
    assert RunConfig.for_preset("toy", lambda_sere=0).lambda_sere == 0


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        RunConfig.for_preset("toy", lamda_sere=1)
    with pytest.raises(ConfigError):
        parse_pairs(["epochs_cgfe=3", "epoch_cgfe=3"])
    with pytest.raises(ConfigError):
        parse_pairs(["no_equals_sign"])
    with pytest.raises(ConfigError):
        parse_pairs(["batch_size=four"])


def test_parse_types():
    d = parse_pairs(["image_size=64x32", "hflip=true", "lr=1e-3", "seed= 9", "data_root=/x"])
    assert d == {"image_size": (64, 32), "hflip": True, "lr": 1e-3, "seed": 9, "data_root": "/x"}
    assert parse_pairs(["image_size=64"])["image_size"] == (64, 64)


def test_load_config_layering(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# experiment\npreset = toy\nepochs_cgfe = 7  # short\nseed = 3\n")
    cfg = load_config(path, None, {"seed": 11})
    assert (cfg.epochs_cgfe, cfg.seed, cfg.base_ch) == (7, 11, 16)
    cfg = load_config(path, "paper", {})
    assert cfg.base_ch == 64 and cfg.epochs_cgfe == 7
    (tmp_path / "bad.cfg").write_text("epochz = 1\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.cfg")


def test_dumps_round_trip(tmp_path):
    cfg = RunConfig.for_preset("toy", seed=4, hflip=True)
    (tmp_path / "c.cfg").write_text(cfg.dumps())
    assert load_config(tmp_path / "c.cfg") == cfg
    assert RunConfig.from_dict(cfg.to_dict()) == cfg


# -- checkpoints ------------------------------------------------------------------------

def _state():
    g = torch.Generator().manual_seed(0)
    return {
        "model": {"w": torch.randn(3, 4, generator=g), "b": torch.randn(4, generator=g).double(),
                  "steps": torch.tensor(7)},
        "optim": {"state": {0: {"exp_avg": torch.randn(2, generator=g)}}, "param_groups": [{"lr": 2e-4,
                                                                                              "betas": (0.5, 0.999)}]},
        "rng": torch.get_rng_state(),
    }


def test_checkpoint_round_trip_bitwise(tmp_path):
    st = _state()
    checkpoint.save(tmp_path / "a.ckpt", {"kind": "x", "epoch": 3}, st)
    meta, back = checkpoint.load(tmp_path / "a.ckpt")
    assert meta == {"kind": "x", "epoch": 3}
    for k, v in st["model"].items():
        assert back["model"][k].dtype == v.dtype
        assert back["model"][k].numpy().tobytes() == v.numpy().tobytes()
    assert back["optim"]["param_groups"][0]["betas"] == (0.5, 0.999)
    assert torch.equal(back["optim"]["state"][0]["exp_avg"], st["optim"]["state"][0]["exp_avg"])
    assert torch.equal(back["rng"], st["rng"])


def test_checkpoint_deterministic_bytes(tmp_path):
    checkpoint.save(tmp_path / "a.ckpt", {"e": 1}, _state())
    checkpoint.save(tmp_path / "b.ckpt", {"e": 1}, _state())
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_header_layout(tmp_path):
    checkpoint.save(tmp_path / "a.ckpt", {}, {"w": torch.arange(3, dtype=torch.float32)})
    data = (tmp_path / "a.ckpt").read_bytes()
    assert data[:8] == checkpoint.MAGIC
    version, hlen = struct.unpack_from("<IQ", data, 8)
    assert version == checkpoint.VERSION
    body = data[20 + hlen:]
    np.testing.assert_array_equal(np.frombuffer(body, "<f4"), [0, 1, 2])


def test_checkpoint_rejects_bad_files(tmp_path):
    p = tmp_path / "a.ckpt"
    checkpoint.save(p, {}, {"w": torch.zeros(2)})
    raw = bytearray(p.read_bytes())
    raw[8:12] = struct.pack("<I", checkpoint.VERSION + 1)
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        checkpoint.load(p)
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        checkpoint.load(tmp_path / "junk.ckpt")
    with pytest.raises(CheckpointError):
        checkpoint.load(tmp_path / "missing.ckpt")
