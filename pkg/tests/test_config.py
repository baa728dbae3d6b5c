"""Presets, JSON merging, environment overrides and validation"""

import json

import pytest

from dcml_config import (PRESETS, config_from_dict, load_config, patch_geometry, preset, save_config, to_dict,
                         validate)
from dcml_shared import ConfigError


@pytest.mark.parametrize("name", PRESETS)
def test_presets_validate(name):
    validate(preset(name))


def test_desk_defaults():
    cfg = preset('desk')
    assert cfg.dcml.m == 0.999 and cfg.dcml.tau == 0.07
    assert (cfg.dcml.r1, cfg.dcml.r2) == (4.0, 2.0)
    assert cfg.num_folds == 5 and cfg.eval.topk == [1, 5]
    assert cfg.dcml.patch_backbone.spatial_schedule() == [24, 24, 12, 6]
    assert cfg.deaging.warmup_steps > 0 and cfg.deaging.spread_ratio > 0


def test_desk_patch_geometry():
    geom = patch_geometry(preset('desk'))
    assert geom.image_size == (64, 64) and geom.patch_size == (48, 48)
    assert geom.offsets == ((0, 0), (0, 16), (16, 0), (16, 16))


def test_full_preset_scale():
    cfg = preset('full')
    assert cfg.dcml.patch_backbone.stage_block_counts == (10, 10, 10)
    assert cfg.dcml.patch_backbone.feature_dim == 256
    assert cfg.dcml.batch_size == 128
    assert cfg.dcml.lr_schedule == [(0, 0.0001), (2, 0.001)]


def test_unknown_preset_and_key():
    with pytest.raises(ConfigError):
        preset('huge')
    with pytest.raises(ConfigError):
        config_from_dict({'dcml': {'temperature': 0.1}})
    with pytest.raises(ConfigError):
        config_from_dict({'dcml': 3})


def test_file_merges_over_preset(tmp_path, data_dir):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({'preset': 'tiny', 'seed': 3,
                                'dcml': {'r1': 8, 'lr_schedule': [[0, 0.1], [1, 0.01]]}}))
    cfg = load_config(path)
    assert cfg.preset == 'tiny' and cfg.seed == 3
    assert cfg.dcml.r1 == 8 and cfg.dcml.lr_schedule == [(0, 0.1), (1, 0.01)]
    assert cfg.dcml.patch_size == 16


def test_overrides_then_environment(tmp_path, data_dir, monkeypatch):
    monkeypatch.setenv('DCML_SEED', '42')
    monkeypatch.setenv('DCML_OUT_DIR', str(tmp_path / "out"))
    cfg = load_config(overrides={'seed': 5, 'precision': 'float64'})
    assert cfg.seed == 42 and cfg.data.seed == 42
    assert cfg.precision == 'float64'
    assert cfg.out_path() == tmp_path / "out"


def test_bad_environment(data_dir, monkeypatch):
    monkeypatch.setenv('DCML_SEED', 'seven')
    with pytest.raises(ConfigError):
        load_config()
    monkeypatch.delenv('DCML_SEED')
    monkeypatch.setenv('DCML_PRECISION', 'float16')
    with pytest.raises(ConfigError):
        load_config()


def test_missing_and_invalid_files(tmp_path, data_dir):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)
    bad.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(bad)


@pytest.mark.parametrize("overrides", [
    {'dcml': {'tau': 0}},
    {'dcml': {'m': 1.5}},
    {'dcml': {'r2': 0.5}},
    {'dcml': {'modalities': ['race']}},
    {'dcml': {'fusion_mode': 'attention'}},
    {'dcml': {'patch_size': 40}},
    {'stages': ['race', 'finetune']},
    {'eval': {'fold': 5}},
    {'num_folds': 1},
    {'race': {'backbone': {'input_size': 32}}},
    {'deaging': {'spread_ratio': 1.0}},
    {'deaging': {'warmup_steps': -1}},
])
def test_validation_rejects(overrides, data_dir):
    with pytest.raises(ConfigError):
        load_config(overrides=overrides)


def test_save_round_trip(tmp_path, data_dir):
    cfg = preset('tiny')
    cfg.dcml.r2 = 16.0
    save_config(cfg, tmp_path / "config.json")
    loaded = load_config(tmp_path / "config.json")
    assert to_dict(loaded) == to_dict(cfg)


def test_default_out_path_under_data_dir(data_dir):
    assert preset('desk').out_path() == data_dir / "runs" / "desk"


@pytest.mark.parametrize("name", ["desk.json", "full.json", "smoke.json"])
def test_shipped_config_files_load(name, data_dir):
    from pathlib import Path
    path = Path(__file__).parent.parent / "configs" / name
    cfg = load_config(path)
    assert cfg.dcml.tau == 0.07 and cfg.dcml.m == 0.999
