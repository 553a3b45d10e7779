from importlib import resources

import pytest

from structseg.config import load_config
from structseg.errors import ConfigError


def test_defaults_load():
    cfg = load_config()
    assert cfg.model.kind == "vitc_unet"
    assert cfg.unet.levels - 1 == cfg.decoder.num_blocks
    assert cfg.loss.gamma == 2.0
    assert cfg.train.patience == 10
    assert cfg.train.min_rel_improvement == 0.01


def test_shipped_default_file_matches_dataclasses(tmp_path):
    text = resources.files("structseg.configs").joinpath("default.toml").read_text()
    path = tmp_path / "default.toml"
    path.write_text(text)
    cfg = load_config(path)
    assert cfg == load_config()


def test_overrides():
    cfg = load_config(overrides={"train.seed": 5, "model.kind": "linear"})
    assert cfg.train.seed == 5
    assert cfg.model.kind == "linear"


def test_unknown_key_reports_field_path():
    with pytest.raises(ConfigError, match="train.bogus"):
        load_config(overrides={"train.bogus": 1})


def test_unknown_section():
    with pytest.raises(ConfigError):
        load_config(overrides={"nonsense.key": 1})


def test_invalid_value():
    with pytest.raises(ConfigError):
        load_config(overrides={"train.patience": 0})


def test_round_trip_dict():
    from structseg.config import rebuild_config
    cfg = load_config(overrides={"train.lr": 0.01})
    assert rebuild_config(cfg.to_dict()) == cfg
