import copy
import math

import numpy as np
import pytest
import torch

from sludgevision.augment import AugmentPolicy, apply_policy
from sludgevision.data_ingest import ImageDataset, NormalizationStats
from sludgevision.errors import TrainingError, ValidationError
from sludgevision.model_zoo import ModelSpec, build_model
from sludgevision.trainer import (
    TrainConfig,
    carve_validation,
    checkpoint_name,
    load_checkpoint,
    lr_at,
    mse,
    predict_dataset,
    save_checkpoint,
    to_tensor,
    train,
)

from conftest import random_dataset


def test_mse_examples():
    assert mse([1, 2, 3], [1, 2, 3]) == 0
    assert mse([0, 0], [3, 4]) == 12.5
    assert mse([150], [160]) == 100
    with pytest.raises(ValidationError):
        mse([1, 2], [1])
    with pytest.raises(ValidationError):
        mse([], [])


def test_lr_at_examples():
    cfg = TrainConfig(epochs=30)
    assert lr_at(0, cfg) == 1e-4
    assert lr_at(30, cfg) == pytest.approx(0.0, abs=1e-20)
    assert lr_at(15, cfg) == pytest.approx(5e-5, abs=1e-12)
    with pytest.raises(ValidationError):
        lr_at(31, cfg)
    with pytest.raises(ValidationError):
        lr_at(-1, cfg)


def test_lr_floor():
    cfg = TrainConfig(epochs=10, initial_lr=1e-3, min_lr=1e-5)
    assert lr_at(10, cfg) == pytest.approx(1e-5, abs=1e-15)
    lrs = [lr_at(e, cfg) for e in range(11)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_config_defaults():
    assert TrainConfig().epochs == 30
    assert TrainConfig(mode="from_scratch").epochs == 95
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.initial_lr, cfg.weight_decay, cfg.betas, cfg.eps) == (32, 1e-4, 0.05, (0.9, 0.999), 1e-8)
    with pytest.raises(ValidationError):
        TrainConfig(initial_lr=1e-5, min_lr=1e-4)
    with pytest.raises(ValidationError):
        TrainConfig(checkpoint_rule="last")


def test_carve_validation_by_day():
    ds = random_dataset(20)
    tr, val = carve_validation(ds, 0.1, np.random.default_rng(0))
    assert len(val.days) == 2 and len(tr.days) == 18
    assert not (tr.days & val.days)


def _fast_config(**kw):
    base = dict(mode="from_scratch", epochs=3, batch_size=8, initial_lr=3e-3, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_train_deterministic():
    ds = random_dataset(10)
    tr, val = ds.select_days(sorted(ds.days)[:8]), ds.select_days(sorted(ds.days)[8:])
    runs = []
    for _ in range(2):
        model = build_model(ModelSpec("tiny_cnn"), 3)
        _, hist = train(model, tr, val, AugmentPolicy(), _fast_config(), 3)
        runs.append(hist.rows())
    assert runs[0] == runs[1]


def test_zero_lr_keeps_weights_and_initial_mse():
    ds = random_dataset(6)
    tr, val = ds.select_days(sorted(ds.days)[:5]), ds.select_days(sorted(ds.days)[5:])
    model = build_model(ModelSpec("tiny_cnn"), 0)
    before = copy.deepcopy(model)
    cfg = _fast_config(epochs=1, initial_lr=0.0, batch_size=len(tr), standardize_targets=False,
                       warm_start_bias=False)
    _, hist = train(model, tr, val, None, cfg)
    for (k, a), b in zip(before.named_parameters(), model.parameters()):
        assert torch.equal(a, b), k
    before.train()
    with torch.no_grad():
        initial = mse(before(to_tensor(tr.images, NormalizationStats())).reshape(-1).numpy(), tr.labels)
    assert hist.epochs[0].train_mse == pytest.approx(initial, rel=1e-5)


def test_weight_decay_shrinks_zero_gradient_weights():
    ds = random_dataset(6, hw=(16, 16))
    ds.images[:] = 0.0
    stats = NormalizationStats((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
    tr, val = ds.select_days(sorted(ds.days)[:5]), ds.select_days(sorted(ds.days)[5:])
    model = build_model(ModelSpec("tiny_cnn"), 0)
    w0 = model.backbone.stages[0][0].weight.detach().clone()
    cfg = _fast_config(epochs=2, batch_size=4, initial_lr=1e-2, weight_decay=0.5)
    train(model, tr, val, None, cfg, normalization=stats)
    w1 = model.backbone.stages[0][0].weight.detach()
    steps_per_epoch = math.ceil(len(tr) / cfg.batch_size)
    factor = np.prod([(1 - lr_at(e, cfg) * cfg.weight_decay) ** steps_per_epoch for e in range(cfg.epochs)])
    assert factor < 1
    torch.testing.assert_close(w1, w0 * factor, rtol=1e-5, atol=1e-9)


def test_checkpoint_rule_selects_min_validation():
    ds = random_dataset(10)
    tr, val = ds.select_days(sorted(ds.days)[:8]), ds.select_days(sorted(ds.days)[8:])
    model = build_model(ModelSpec("tiny_cnn"), 1)
    model, hist = train(model, tr, val, AugmentPolicy(), _fast_config(epochs=4, initial_lr=1e-2))
    vals = [r.val_mse for r in hist.epochs]
    assert hist.selected_checkpoint_epoch == int(np.argmin(vals))
    # the returned weights are the selected epoch's
    assert mse(predict_dataset(model, val, NormalizationStats()), val.labels) == pytest.approx(min(vals), rel=1e-6)


def test_paper_faithful_rule_uses_eval_set():
    ds = random_dataset(12)
    days = sorted(ds.days)
    tr, val, test = ds.select_days(days[:8]), ds.select_days(days[8:10]), ds.select_days(days[10:])
    cfg = _fast_config(epochs=3, checkpoint_rule="paper_faithful_best_eval_mse")
    _, hist = train(build_model(ModelSpec("tiny_cnn"), 1), tr, val, None, cfg, eval_set=test)
    evals = [r.eval_mse for r in hist.epochs]
    assert hist.selected_checkpoint_epoch == int(np.argmin(evals))
    with pytest.raises(ValidationError):
        train(build_model(ModelSpec("tiny_cnn"), 1), tr, val, None, cfg)


def test_validation_never_augmented():
    ds = random_dataset(8)
    tr, val = ds.select_days(sorted(ds.days)[:6]), ds.select_days(sorted(ds.days)[6:])
    calls = []

    def counting(img, policy, rng):
        calls.append(img.shape)
        return apply_policy(img, policy, rng)

    cfg = _fast_config(epochs=2)
    train(build_model(ModelSpec("tiny_cnn"), 0), tr, val, AugmentPolicy(), cfg, augment_fn=counting)
    assert len(calls) == len(tr) * cfg.epochs


def test_train_errors():
    ds = random_dataset(6)
    days = sorted(ds.days)
    tr = ds.select_days(days[:4])
    model = build_model(ModelSpec("tiny_cnn"), 0)
    with pytest.raises(TrainingError, match="both train and validation"):
        train(model, tr, ds.select_days(days[3:]), None, _fast_config())
    with pytest.raises(TrainingError, match="non-empty"):
        train(model, tr, ds.take([]), None, _fast_config())
    with pytest.raises(TrainingError, match="non-finite"):
        train(model, tr, ds.select_days(days[4:]), None, _fast_config(),
              augment_fn=lambda img, p, r: np.full_like(img, np.nan))


def test_layerwise_decay_scales_groups():
    ds = random_dataset(6)
    tr, val = ds.select_days(sorted(ds.days)[:5]), ds.select_days(sorted(ds.days)[5:])
    model = build_model(ModelSpec("tiny_cnn"), 0)
    _, hist = train(model, tr, val, None, _fast_config(epochs=1, layerwise_lr_decay=0.5))
    assert hist.epochs[0].lr == 3e-3


def test_checkpoint_roundtrip(tmp_path):
    ds = random_dataset(4)
    model = build_model(ModelSpec("tiny_cnn"), 4)
    model.set_target_scaling(210.0, 50.0)
    cfg = _fast_config()
    name = checkpoint_name("tiny_cnn", "tfs", 3, 7)
    assert name == "tiny_cnn_tfs_fold3_epoch7.ckpt"
    path = save_checkpoint(tmp_path / name, model, cfg, 4, "abc", NormalizationStats(), (32, 32))
    loaded, payload = load_checkpoint(path)
    assert payload["manifest_hash"] == "abc" and payload["seed"] == 4
    assert payload["train_config"]["epochs"] == 3
    stats = NormalizationStats()
    np.testing.assert_array_equal(predict_dataset(model, ds, stats), predict_dataset(loaded, ds, stats))


def test_history_rows_format():
    ds = random_dataset(6)
    tr, val = ds.select_days(sorted(ds.days)[:5]), ds.select_days(sorted(ds.days)[5:])
    _, hist = train(build_model(ModelSpec("tiny_cnn"), 0), tr, val, None, _fast_config(epochs=2))
    rows = hist.rows()
    assert [r["epoch"] for r in rows] == [0, 1]
    assert set(rows[0]) == {"epoch", "train_mse", "val_mse", "lr"}
    assert 0 <= hist.selected_checkpoint_epoch < 2


def test_synthetic_training_reduces_loss(tmp_path):
    from sludgevision.data_ingest import load_manifest
    from sludgevision.synth import SynthParams, generate_dataset

    generate_dataset(60, 5, 3, tmp_path, SynthParams())
    ds = ImageDataset.from_manifest(load_manifest(tmp_path / "manifest.csv", (128, 96)))
    tr, val = carve_validation(ds, 0.1, np.random.default_rng(0))
    cfg = TrainConfig(mode="from_scratch", epochs=10, initial_lr=3e-3, seed=1)
    _, hist = train(build_model(ModelSpec("tiny_cnn"), 1), tr, val, AugmentPolicy(), cfg)
    assert hist.epochs[9].train_mse < hist.epochs[0].train_mse
