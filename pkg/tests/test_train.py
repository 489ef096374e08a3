from dataclasses import replace

import numpy as np
import pytest

from cssr.data import AugmentSpec, Dataset, gen_gaussian_2d
from cssr.head import HeadConfig
from cssr.models import Model
from cssr.train import (TrainConfig, TrainingDiverged, build_model, gaussian2d_preset, image_preset, full_scale_preset,
                        train)


@pytest.fixture(scope="module")
def small_data():
    return gen_gaussian_2d(n_per_class=40, seed=1)


def test_zero_learning_rate_keeps_parameters(small_data):
    cfg = replace(gaussian2d_preset(), epochs=1, lr_initial=0.0)
    model = build_model(cfg)
    before = {k: v.copy() for k, v in model.graph.state().items()}
    train(cfg, small_data, model)
    for k, v in model.graph.state().items():
        np.testing.assert_array_equal(v, before[k])


@pytest.mark.parametrize("mode", ["cssr", "rcssr", "linear", "gcpl", "rpl"])
def test_training_is_bit_deterministic(small_data, mode):
    cfg = replace(gaussian2d_preset(mode), epochs=2)
    a, _ = train(cfg, small_data)
    b, _ = train(cfg, small_data)
    for k, v in a.graph.state().items():
        assert np.array_equal(v, b.graph.state()[k]), k


def test_gaussian_preset_reaches_high_accuracy(gaussian_run):
    assert gaussian_run["history"].epoch_accuracy[-1] >= 0.99


def test_learning_rate_schedule():
    cfg = TrainConfig(epochs=10, lr_initial=0.4, lr_drop_epochs=(3, 7), lr_drop_factor=0.1)
    assert [round(cfg.lr_at(e), 6) for e in (0, 2, 3, 6, 7, 9)] == [0.4, 0.4, 0.04, 0.04, 0.004, 0.004]


@pytest.mark.parametrize("bad", [dict(epochs=0), dict(batch_size=0), dict(lr_drop_epochs=(5, 3)),
                                 dict(lr_drop_epochs=(50,)), dict(momentum=1.0), dict(mode="svm")])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        replace(TrainConfig(), **bad).validate()


def test_config_dict_roundtrip():
    for cfg in (gaussian2d_preset("rcssr"), image_preset("gcpl"), full_scale_preset()):
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epochs": 3, "warmup": 2})


def test_full_scale_preset_values():
    cfg = full_scale_preset()
    assert (cfg.epochs, cfg.lr_initial, cfg.batch_size, cfg.lr_drop_epochs) == (200, 0.4, 128, (130, 190))
    assert cfg.head.latent_dim == 64 and cfg.momentum == 0.9


def test_labels_must_be_remapped(small_data):
    bad = Dataset(small_data.x, small_data.y + 1, 5)
    with pytest.raises(ValueError, match="remap"):
        train(replace(gaussian2d_preset(), epochs=1), bad)


def test_divergence_reports_epoch_and_batch(small_data):
    x = small_data.x.copy()
    x[7] = np.nan
    cfg = replace(gaussian2d_preset("linear"), epochs=3, batch_size=16)
    with pytest.raises(TrainingDiverged) as exc:
        train(cfg, Dataset(x, small_data.y, 4))
    order = np.random.default_rng([cfg.seed, 0]).permutation(len(x))
    assert exc.value.epoch == 0
    assert exc.value.batch == int(np.flatnonzero(order == 7)[0]) // 16
    assert "epoch" in str(exc.value)


def test_image_training_with_augmentation_runs():
    rng = np.random.default_rng(0)
    data = Dataset(rng.uniform(size=(12, 8, 8, 1)), np.arange(12) % 3, 3)
    cfg = replace(image_preset("cssr", 3), epochs=2, lr_drop_epochs=(1,), batch_size=4)
    cfg = replace(cfg, backbone=replace(cfg.backbone, input_hw=(8, 8)))
    model, log = train(cfg, data)
    assert len(log.epoch_loss) == 2
    assert np.all(np.isfinite(log.epoch_loss))


def test_model_rejects_mismatched_head_mode():
    from cssr.backbone import BackboneConfig

    with pytest.raises(ValueError):
        Model("rcssr", BackboneConfig(), HeadConfig())
    with pytest.raises(ValueError):
        Model("knn", BackboneConfig(), HeadConfig())
