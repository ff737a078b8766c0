import csv
import json

import numpy as np
import pytest
import torch

from conftest import NO_AUGMENT, TOY_CONFIG
from polypseg.checkpoint import load_checkpoint
from polypseg.dataset_io import SplitTriple
from polypseg.errors import ConfigError, DataValidationError, NumericError
from polypseg.preprocess import AugmentPolicy, augment
from polypseg.trainer import (
    EPOCH_LOG_FIELDS,
    EarlyStopping,
    TrainConfig,
    evaluate_samples,
    load_processed,
    metric_mode,
    read_epoch_log,
    stopping_epoch,
    train,
)
from polypseg.unet import build_unet

SIDE = 32


@pytest.fixture(scope="module")
def toy_data(small_dataset):
    ids = small_dataset.ids
    split = SplitTriple(ids[:8], ids[8:12], ids[12:], 0)
    return split, small_dataset, load_processed(ids, small_dataset, SIDE)


def run(toy_data, **kw):
    split, manifest, samples = toy_data
    cfg_kw = dict(lr=1e-3, max_epochs=3, batch_size=4, early_stop_patience=3)
    cfg_kw.update(kw.pop("cfg", {}))
    return train(build_unet(TOY_CONFIG), split, manifest, TrainConfig(**cfg_kw), side=SIDE,
                 samples=samples, **kw)


# -- configuration ------------------------------------------------------------


def test_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        TrainConfig(max_epochs=5, early_stop_patience=6)
    with pytest.raises(ConfigError):
        TrainConfig(early_stop_patience=0)
    with pytest.raises(ConfigError):
        TrainConfig(early_stop_metric="accuracy")


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.max_epochs, cfg.batch_size, cfg.early_stop_patience) == (1e-4, 50, 8, 10)
    assert metric_mode("val_iou") == "max" and metric_mode("val_loss") == "min"


# -- early stopping -----------------------------------------------------------


@pytest.mark.parametrize("k", [0, 3, 17, 30])
def test_stops_patience_epochs_after_peak(k):
    values = [i / 100 for i in range(k + 1)] + [0.0] * 60
    assert stopping_epoch(values, patience=10, max_epochs=50) == min(k + 10, 49)


def test_ties_are_not_improvements():
    values = [0.5] * 20
    assert stopping_epoch(values, patience=10) == 10


def test_min_mode():
    s = EarlyStopping(2, "min")
    assert s.update(0, 1.0) and s.update(1, 0.5)
    assert not s.update(2, 0.5) and not s.should_stop
    assert not s.update(3, 0.6) and s.should_stop
    assert s.best_epoch == 1


def test_nan_counts_as_no_improvement():
    s = EarlyStopping(1)
    s.update(0, 0.3)
    assert not s.update(1, float("nan")) and s.should_stop


def test_patience_equal_to_max_epochs_runs_all(tmp_path, small_dataset):
    ids = small_dataset.ids[:2]
    samples = load_processed(ids, small_dataset, SIDE)
    cfg = TrainConfig(lr=1e-3, max_epochs=50, batch_size=2, early_stop_patience=50, augment=NO_AUGMENT)
    res = train(build_unet(TOY_CONFIG), SplitTriple(ids[:1], ids[1:], [], 0), small_dataset, cfg,
                side=SIDE, samples=samples, out_dir=tmp_path)
    assert len(res.logs) == 50
    with (tmp_path / "epoch_log.csv").open() as fh:
        assert len(list(csv.DictReader(fh))) == 50


def test_early_stop_halts_training(toy_data):
    # lr so small that nothing changes measurably: val iou plateaus, stop after patience
    res = run(toy_data, cfg=dict(lr=1e-12, max_epochs=20, early_stop_patience=2))
    assert len(res.logs) == 3
    assert res.best_epoch == 0


# -- behaviour ----------------------------------------------------------------


def test_validation_is_never_augmented(toy_data):
    split = toy_data[0]
    seen = []

    def spy(sample, policy, rng):
        seen.append(sample.id)
        return augment(sample, policy, rng)

    res = run(toy_data, augment_fn=spy)
    assert set(seen) <= set(split.train)
    assert not set(seen) & set(split.val + split.test)
    assert len(seen) == 3 * len(split.train) and res.augmented_ids == seen


def test_deterministic_repeat(toy_data):
    a, b = run(toy_data), run(toy_data)
    assert a.step_losses == b.step_losses
    assert [l.row() | {"seconds": 0} for l in a.logs] == [l.row() | {"seconds": 0} for l in b.logs]
    for pa, pb in zip(a.model.parameters(), b.model.parameters()):
        assert torch.equal(pa, pb)


def test_logs_and_checkpoints_written(tmp_path, toy_data):
    res = run(toy_data, out_dir=tmp_path)
    rows = read_epoch_log(tmp_path / "epoch_log.csv")
    assert [r.epoch for r in rows] == [0, 1, 2]
    header = (tmp_path / "epoch_log.csv").read_text().splitlines()[0].split(",")
    assert tuple(header) == EPOCH_LOG_FIELDS
    jsonl = [json.loads(l) for l in (tmp_path / "epoch_log.jsonl").read_text().splitlines()]
    assert [j["epoch"] for j in jsonl] == [0, 1, 2]
    for r, l in zip(rows, res.logs):
        assert r.val.iou == pytest.approx(l.val.iou) and r.train_loss == pytest.approx(l.train_loss)
        assert 0 <= r.val.iou <= 1 and 0 <= r.train.f_dice <= 1
    _, state = load_checkpoint(tmp_path / "last.ckpt")
    assert state.epoch == 2 and state.optimizer is not None
    _, best = load_checkpoint(tmp_path / "best.ckpt")
    assert best.epoch == res.best_epoch


def test_best_weights_returned(toy_data):
    res = run(toy_data, cfg=dict(max_epochs=4, early_stop_patience=4))
    _, _, val_samples = toy_data
    val = [val_samples[i] for i in toy_data[0].val]
    rec, _, _ = evaluate_samples(res.model, val)
    assert rec.iou == pytest.approx(res.logs[res.best_epoch].val.iou, abs=1e-6)


def test_resume_continues_at_next_epoch(tmp_path, toy_data):
    full = run(toy_data, cfg=dict(max_epochs=4, early_stop_patience=4))
    run(toy_data, cfg=dict(max_epochs=2, early_stop_patience=2), out_dir=tmp_path)
    model, state = load_checkpoint(tmp_path / "last.ckpt")
    assert state.epoch == 1
    split, manifest, samples = toy_data
    cfg = TrainConfig(lr=1e-3, max_epochs=4, batch_size=4, early_stop_patience=4)
    resumed = train(model, split, manifest, cfg, side=SIDE, samples=samples, resume=state)
    assert [l.epoch for l in resumed.logs] == [2, 3]
    assert resumed.step_losses == pytest.approx(full.step_losses[-len(resumed.step_losses):], rel=1e-5)
    assert resumed.logs[-1].val.iou == pytest.approx(full.logs[-1].val.iou, abs=1e-5)


def test_non_finite_loss_raises(toy_data):
    split, manifest, samples = toy_data
    bad = dict(samples)
    first = split.train[0]
    img = bad[first].image.copy()
    img[0, 0, 0] = np.nan
    bad[first] = bad[first].__class__(first, img, bad[first].mask, bad[first].onehot)
    with pytest.raises(NumericError, match="epoch 0"):
        train(build_unet(TOY_CONFIG), split, manifest,
              TrainConfig(max_epochs=1, early_stop_patience=1, augment=NO_AUGMENT), side=SIDE, samples=bad)


def test_empty_train_split(toy_data):
    _, manifest, samples = toy_data
    with pytest.raises(DataValidationError):
        train(build_unet(TOY_CONFIG), SplitTriple([], ["x"], [], 0), manifest, TrainConfig(), samples=samples)


def test_empty_val_monitors_train(toy_data, caplog):
    split, manifest, samples = toy_data
    cfg = TrainConfig(lr=1e-3, max_epochs=2, batch_size=4, early_stop_patience=2,
                      augment=AugmentPolicy(seed=1))
    res = train(build_unet(TOY_CONFIG), SplitTriple(split.train, [], split.test, 0), manifest, cfg,
                side=SIDE, samples=samples)
    assert "validation split is empty" in caplog.text
    assert all(l.val == l.train for l in res.logs)
