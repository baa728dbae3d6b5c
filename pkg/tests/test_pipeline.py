"""End-to-end stages on the tiny preset; desk-scale trend checks are marked slow"""

import copy
import json

import numpy as np
import pytest

from dcml_config import preset
from dcml_eval import random_baseline
from dcml_pipeline import (CHECKPOINTS, MODALITY_SETS, ablation_run, ablation_table, build_context,
                           encoder_config, evaluate_checkpoint, parse_modality_set, run_dcml_stage,
                           train_pipeline)
from dcml_shared import ConfigError, DependencyError, read_run_log
from dcml_storage import load_checkpoint


@pytest.fixture
def tiny_run(tiny_cfg):
    return tiny_cfg, train_pipeline(tiny_cfg)


def test_smoke_run_writes_three_checkpoints(tiny_run):
    cfg, result = tiny_run
    out = cfg.out_path()
    for stage, name in CHECKPOINTS.items():
        assert (out / name).exists(), stage
        assert result.checkpoints[stage] == out / name
    for name in ("config.json", "eval.json", "eval.txt", "race.log.jsonl", "deaging.log.jsonl", "dcml.log.jsonl"):
        assert (out / name).exists(), name
    saved = json.loads((out / "config.json").read_text())
    assert saved['preset'] == 'tiny'


def test_frozen_extractors_unchanged_by_stage_three(tiny_run):
    _, result = tiny_run
    assert set(result.checksums) == {'race', 'deaging'}
    for stage, sums in result.checksums.items():
        assert sums['before'] == sums['after'], stage


def test_stage_logs(tiny_run):
    cfg, result = tiny_run
    out = cfg.out_path()
    race = read_run_log(out / "race.log.jsonl")
    assert [r['epoch'] for r in race] == list(range(cfg.race.epochs))
    deaging = read_run_log(out / "deaging.log.jsonl")
    assert deaging[0]['phase'] == "init" and deaging[-1]['phase'] == "final"
    assert [r['phase'] for r in deaging].count("warmup") == cfg.deaging.warmup_steps
    dcml = read_run_log(out / "dcml.log.jsonl")
    assert [r['epoch'] for r in dcml] == list(range(cfg.dcml.epochs))
    for record in dcml:
        assert np.isfinite(record['loss'])
        assert 'margin' in record and 'test_top1' in record and 'test_top5' in record
    assert len(result.history) == cfg.dcml.epochs


def test_report_cells_are_percentages(tiny_run):
    _, result = tiny_run
    report = result.report
    assert report.ks == [1, 5]
    for fold in report.folds:
        for ks in fold.cells.values():
            assert all(0.0 <= v <= 100.0 for v in ks.values())
    assert report.mean('Avg', 5) >= report.mean('Avg', 1)


def test_checkpoint_holds_query_and_key(tiny_run):
    cfg, _ = tiny_run
    params = load_checkpoint(cfg.out_path() / "dcml.dck")
    assert any(k.startswith("query.") for k in params)
    assert any(k.startswith("key.") for k in params)


def test_evaluate_checkpoint_reproduces_report(tiny_run):
    cfg, result = tiny_run
    report = evaluate_checkpoint(cfg, cfg.out_path() / "dcml.dck", cfg.eval.fold, [1, 5])
    assert report.folds[0].cells == result.report.folds[0].cells
    assert report.metadata['checkpoint'].endswith("dcml.dck")


def test_missing_checkpoint_is_dependency_error(tiny_run, tmp_path):
    cfg, _ = tiny_run
    with pytest.raises(DependencyError):
        evaluate_checkpoint(cfg, tmp_path / "absent.dck", 0, [1])


def test_stage_three_alone_needs_extractors(tiny_cfg):
    tiny_cfg.stages = ['dcml']
    with pytest.raises(DependencyError):
        train_pipeline(tiny_cfg)


def test_stage_three_reuses_saved_extractors(tiny_cfg):
    first = copy.deepcopy(tiny_cfg)
    first.stages = ['race', 'deaging']
    result = train_pipeline(first)
    assert result.report is None and set(result.checkpoints) == {'race', 'deaging'}
    second = copy.deepcopy(tiny_cfg)
    second.stages = ['dcml']
    result = train_pipeline(second)
    assert result.report is not None


def test_face_only_needs_no_extractors(tiny_cfg):
    tiny_cfg.stages = ['dcml']
    tiny_cfg.dcml.modalities = ['face']
    tiny_cfg.eval.curves = False
    result = train_pipeline(tiny_cfg)
    assert result.checksums == {}
    assert encoder_config(tiny_cfg).modality_dims == {}


def test_bank_entries_carry_child_and_family_ids(tiny_cfg):
    tiny_cfg.dcml.modalities = ['face']
    tiny_cfg.eval.curves = False
    ctx = build_context(tiny_cfg)
    state, _ = run_dcml_stage(ctx, {}, 0)
    children = {p.child for p in ctx.protocol.pairs(0, 'train')}
    samples, families = state.bank.sample_ids(), state.bank.family_ids()
    assert set(samples) <= children
    assert all(ctx.dataset[s].family_id == f for s, f in zip(samples, families))
    # one query per training family: its own family never counts as a negative
    for family in set(families):
        assert state.bank.effective_size([family])[0] == len(set(samples[families != family]))


def test_training_is_deterministic(tiny_cfg, tmp_path):
    tiny_cfg.stages = ['dcml']
    tiny_cfg.dcml.modalities = ['face']
    tiny_cfg.eval.curves = False
    a = train_pipeline(tiny_cfg)
    other = copy.deepcopy(tiny_cfg)
    other.paths.out_dir = str(tmp_path / "again")
    b = train_pipeline(other)
    assert [h['loss'] for h in a.history] == [h['loss'] for h in b.history]


def test_dataset_size_must_match(tiny_cfg):
    from dcml_synth import generate_family_dataset
    with pytest.raises(ConfigError):
        build_context(tiny_cfg, generate_family_dataset(1, 10, 4, image_size=16))


def test_modality_dims_follow_modalities(tiny_cfg):
    dims = encoder_config(tiny_cfg).modality_dims
    assert dims == {'race': tiny_cfg.race.backbone.feature_dim, 'deaging': tiny_cfg.deaging.backbone.feature_dim}


def test_parse_modality_set():
    assert parse_modality_set('face+race') == ['face', 'race']
    assert parse_modality_set('face,deaging') == ['face', 'deaging']
    with pytest.raises(ConfigError):
        parse_modality_set('race')
    with pytest.raises(ConfigError):
        parse_modality_set('face+texture')


def test_ablation_face_only_uses_face_width(tiny_cfg):
    tiny_cfg.eval.curves = False
    entries = ablation_run(tiny_cfg, [['face']], grid=[(2, 2)], prepare=False)
    assert len(entries) == 1
    assert entries[0].label == "face_r1-2_r2-2_adaptive"
    run_cfg = copy.deepcopy(tiny_cfg)
    run_cfg.dcml.modalities = ['face']
    from dcml_contrastive import DCMLEncoder
    encoder = DCMLEncoder(encoder_config(run_cfg), np.random.default_rng(0))
    assert encoder.fusion.input_dim == 4 * tiny_cfg.dcml.patch_backbone.feature_dim
    saved = json.loads((tiny_cfg.out_path() / "ablation.json").read_text())
    assert len(saved['runs']) == 1
    assert "face_r1-2_r2-2_adaptive" in ablation_table(entries, k=5)


def test_ablation_without_checkpoints(tiny_cfg):
    tiny_cfg.eval.curves = False
    with pytest.raises(DependencyError):
        ablation_run(tiny_cfg, [['face', 'race']], prepare=False)


def test_ablation_prepares_extractors_once(tiny_cfg):
    tiny_cfg.eval.curves = False
    tiny_cfg.dcml.epochs = 1
    entries = ablation_run(tiny_cfg, [['face', 'race'], ['face', 'race', 'deaging']], grid=[(4, 2)],
                           fusion_modes=['adaptive', 'concat'])
    assert len(entries) == 4
    seed_dir = tiny_cfg.out_path() / f"seed{tiny_cfg.seed}"
    assert (seed_dir / "race.dck").exists() and (seed_dir / "deaging.dck").exists()
    assert {e.fusion_mode for e in entries} == {'adaptive', 'concat'}


def test_full_grid_has_sixteen_points():
    from dcml_main import parse_grid
    grid = parse_grid('all')
    assert len(grid) == 16
    assert {r for r, _ in grid} == {2, 4, 8, 16}


# ----- desk-scale trend measurements -----
def _desk(tmp_path, seed, epochs=2):
    cfg = preset('desk')
    cfg.seed = seed
    cfg.data.seed = seed
    cfg.race.epochs = 2
    cfg.deaging.rounds = 2
    cfg.dcml.epochs = epochs
    cfg.paths.out_dir = str(tmp_path / f"desk{seed}")
    return cfg


@pytest.mark.slow
@pytest.mark.parametrize("seed", [7, 8, 9])
def test_desk_epoch_loss_trends_down(data_dir, tmp_path, seed):
    result = train_pipeline(_desk(tmp_path, seed, epochs=4))
    assert len(result.checkpoints) == 3
    assert result.history[-1]['loss'] < result.history[0]['loss']


@pytest.mark.slow
def test_desk_all_modalities_not_worse_than_face(data_dir, tmp_path):
    cfg = _desk(tmp_path, 7, epochs=4)
    cfg.eval.curves = False
    entries = ablation_run(cfg, [MODALITY_SETS['face'], MODALITY_SETS['face+race+deaging']], seeds=[7, 8, 9])
    face = np.mean([e.report.mean('Avg', 5) for e in entries if e.modalities == ['face']])
    full = np.mean([e.report.mean('Avg', 5) for e in entries if len(e.modalities) == 3])
    assert full >= face


@pytest.mark.slow
@pytest.mark.timeout(3600)
def test_desk_retrieval_beats_chance_tenfold(data_dir, tmp_path):
    ratios = []
    for seed in (7, 8, 9):
        cfg = preset('desk')
        cfg.seed = cfg.data.seed = seed
        cfg.eval.curves = False
        cfg.paths.out_dir = str(tmp_path / f"retrieval{seed}")
        report = train_pipeline(cfg).report
        chance = np.mean([random_baseline(f.gallery_size, 1) for f in report.folds])
        ratios.append(report.mean('Avg', 1) / chance)
    assert np.mean(ratios) >= 10.0
