"""Race encoder, its cross-entropy and the short Adam training run"""

import numpy as np
import pytest

import dcml_tensor as T
from dcml_nn import BackboneConfig
from dcml_race import RaceEncoder, RaceSchedule, encode_race, race_loss, train_race
from dcml_shared import ConfigError, DimensionError, LabelError, RunLog
from dcml_synth import generate_age_series, stack_images

CFG = BackboneConfig(stem_channels=4, stage_block_counts=(1, 1, 1), stage_bottleneck=(2, 2, 4),
                     stage_channels=(4, 8, 8), feature_dim=6, input_size=16)


def test_uniform_logits_ln3():
    loss = race_loss(T.Tensor(np.zeros((4, 3))), [0, 1, 2, 1])
    assert loss.item() == pytest.approx(np.log(3), abs=1e-6)


def test_saturated_logits(f64):
    logits = np.zeros((2, 3))
    logits[0, 1] = logits[1, 2] = 20.0
    assert race_loss(T.Tensor(logits), [1, 2]).item() < 1e-8


def test_hand_computed_single_row(f64):
    loss = race_loss(T.Tensor([[1.0, 0.0, 0.0]]), [0]).item()
    assert loss == pytest.approx(-np.log(np.e / (np.e + 2)), abs=1e-12)


def test_label_and_shape_errors():
    with pytest.raises(LabelError):
        race_loss(T.Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(DimensionError):
        race_loss(T.Tensor(np.zeros((2, 4))), [0, 1])
    with pytest.raises(DimensionError):
        race_loss(T.Tensor(np.zeros((2, 3))), [0])


def test_identical_images_identical_features(rng):
    encoder = RaceEncoder(CFG, np.random.default_rng(0))
    image = rng.standard_normal((16, 16, 3))
    f = encode_race(encoder, T.Tensor(np.stack([image, image])))
    assert np.array_equal(f.numpy()[0], f.numpy()[1])
    assert len(T.get_tape()) == 0


def test_features_match_backbone_then_head(rng):
    encoder = RaceEncoder(CFG, np.random.default_rng(0))
    x = T.Tensor(rng.standard_normal((2, 16, 16, 3)))
    f, logits = encoder(x)
    direct = encoder.head(encoder.backbone(x))
    assert np.allclose(logits.numpy(), direct.numpy(), atol=1e-6)
    assert f.shape == (2, 6)


def test_wrong_image_size_rejected(rng):
    encoder = RaceEncoder(CFG, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        encoder.features(T.Tensor(rng.standard_normal((1, 20, 20, 3))))


def test_schedule_decays_tenfold():
    assert RaceSchedule(rate=0.001, decay_epoch=2).lr_schedule() == [(0, 0.001), (2, 0.0001)]


def _race_data(n_ids=6, per_id=4):
    series = generate_age_series(3, n_ids, per_id, image_size=16)
    return stack_images(series), np.array([s.race for s in series])


def test_training_logs_epochs_and_learns():
    images, labels = _race_data()
    encoder = RaceEncoder(CFG, np.random.default_rng(1))
    log = RunLog(None)
    train_race(encoder, images, labels, RaceSchedule(epochs=6, batch_size=8, rate=0.01, decay_epoch=4), log=log)
    assert [r['epoch'] for r in log.records] == list(range(6))
    assert log.records[4]['lr'] == pytest.approx(0.001)
    assert log.records[-1]['loss'] < log.records[0]['loss']


def test_training_is_deterministic():
    images, labels = _race_data(4, 3)
    sched = RaceSchedule(epochs=2, batch_size=4, rate=0.01)
    a = train_race(RaceEncoder(CFG, np.random.default_rng(2)), images, labels, sched)
    b = train_race(RaceEncoder(CFG, np.random.default_rng(2)), images, labels, sched)
    assert a.checksum() == b.checksum()


def test_frozen_encoder_refuses_training_and_stays_fixed(rng):
    images, labels = _race_data(4, 3)
    encoder = RaceEncoder(CFG, np.random.default_rng(2))
    encoder.freeze()
    before = encoder.checksum()
    with pytest.raises(ConfigError):
        train_race(encoder, images, labels, RaceSchedule(epochs=1))
    f = encoder.features(T.Tensor(images[:2]))
    assert not f.requires_grad
    assert len(T.get_tape()) == 0
    assert encoder.checksum() == before


@pytest.mark.slow
def test_desk_race_encoder_learns(data_dir, tmp_path):
    from dcml_config import preset
    from dcml_pipeline import build_context, run_race_stage

    cfg = preset('desk')
    cfg.stages = ['race']
    cfg.paths.out_dir = str(tmp_path / "desk")
    ctx = build_context(cfg)
    encoder = run_race_stage(ctx)
    images = stack_images(ctx.age_series)
    labels = np.array([s.race for s in ctx.age_series])
    with T.no_grad():
        predicted = np.concatenate([np.argmax(encoder(T.Tensor(images[i:i + 64]))[1].numpy(), axis=1)
                                    for i in range(0, len(images), 64)])
    assert np.mean(predicted == labels) > 0.6
