"""Tests for run-config loading and validation."""

import json

import pytest

from imt.config import DataConfig, RunConfig, load_run_config, run_config_from_dict
from imt.errors import ConfigError
from imt.network import ModelConfig
from imt.noisegen import GmapModel
from imt.training import LossConfig, TrainConfig


def test_empty_document_gives_defaults():
    cfg = run_config_from_dict({})
    assert cfg.model == ModelConfig()
    assert cfg.train == TrainConfig()
    assert cfg.loss == LossConfig()
    assert cfg.noise == GmapModel()
    assert cfg.data == DataConfig()


def test_section_values_are_applied():
    cfg = run_config_from_dict(
        {
            "model": {"channels": 8, "heads": 2, "window": 4},
            "train": {"lr": 0.01, "patch_sizes": [16, 32], "seed": 9},
            "loss": {"perceptual_weight": 0.2},
            "noise": {"kind": "radial_ramp", "alpha": 0.5},
            "data": {"train_dir": "/tmp/stacks"},
        }
    )
    assert cfg.model.channels == 8
    assert cfg.train.lr == 0.01
    assert cfg.train.patch_sizes == (16, 32)
    assert cfg.loss.perceptual_weight == 0.2
    assert cfg.noise.alpha == 0.5
    assert cfg.data.train_dir == "/tmp/stacks"


def test_unknown_top_level_key_rejected():
    with pytest.raises(ConfigError, match="unknown top-level key 'modle'"):
        run_config_from_dict({"modle": {}})


def test_unknown_section_key_rejected():
    with pytest.raises(ConfigError, match="unknown key 'chanels' in section 'model'"):
        run_config_from_dict({"model": {"chanels": 8}})
    with pytest.raises(ConfigError, match="'train'"):
        run_config_from_dict({"train": {"learning_rate": 0.1}})


def test_invalid_values_surface_as_config_errors():
    with pytest.raises(ConfigError, match="section 'train'"):
        run_config_from_dict({"train": {"lr": -1.0}})
    with pytest.raises(ConfigError, match="section 'noise'"):
        run_config_from_dict({"noise": {"kind": "swirl"}})
    with pytest.raises(ConfigError, match="section 'model'"):
        run_config_from_dict({"model": {"channels": "many"}})


def test_section_must_be_object():
    with pytest.raises(ConfigError, match="section 'loss' must be an object"):
        run_config_from_dict({"loss": 3})
    with pytest.raises(ConfigError, match="root must be an object"):
        run_config_from_dict([1, 2])


def test_data_val_fraction_overrides_train():
    cfg = run_config_from_dict(
        {"train": {"val_fraction": 0.25}, "data": {"val_fraction": 0.5}}
    )
    assert cfg.train.val_fraction == 0.5
    with pytest.raises(ConfigError, match="section 'data'"):
        run_config_from_dict({"data": {"val_fraction": 1.5}})


def test_load_run_config_round_trip(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"model": {"channels": 16}}))
    cfg = load_run_config(path)
    assert isinstance(cfg, RunConfig)
    assert cfg.model.channels == 16


def test_load_run_config_bad_json(tmp_path):
    path = tmp_path / "run.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_run_config(path)


def test_load_run_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_run_config(tmp_path / "nope.json")
