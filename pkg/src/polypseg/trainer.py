"""Adam + soft Dice training loop with per-epoch metrics and early stopping."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .checkpoint import TrainState, save_checkpoint
from .dataset_io import DatasetManifest, SplitTriple, load_sample
from .errors import ConfigError, DataValidationError, NumericError
from .metrics import MetricRecord, Scope, binarize_prediction, score, soft_dice_loss
from .preprocess import TARGET_SIDE, AugmentPolicy, ProcessedSample, augment, process
from .unet import UNet

log = logging.getLogger(__name__)

METRICS = ("val_iou", "val_dice", "val_loss")
EPOCH_LOG_FIELDS = ("epoch", "train_iou", "train_f", "train_loss", "val_iou", "val_f", "val_loss", "seconds")
ADAM_BETAS = (0.9, 0.999)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    max_epochs: int = 50
    batch_size: int = 8
    early_stop_patience: int = 10
    early_stop_metric: str = "val_iou"
    seed: int = 0
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigError("max_epochs and batch_size must be >= 1")
        if not 1 <= self.early_stop_patience <= self.max_epochs:
            raise ConfigError(
                f"early_stop_patience must be in [1, max_epochs={self.max_epochs}], "
                f"got {self.early_stop_patience}"
            )
        if self.early_stop_metric not in METRICS:
            raise ConfigError(f"early_stop_metric must be one of {METRICS}")


@dataclass
class EpochLog:
    epoch: int
    train: MetricRecord
    train_loss: float
    val: MetricRecord
    val_loss: float
    seconds: float

    def row(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_iou": self.train.iou,
            "train_f": self.train.f_dice,
            "train_loss": self.train_loss,
            "val_iou": self.val.iou,
            "val_f": self.val.f_dice,
            "val_loss": self.val_loss,
            "seconds": self.seconds,
        }

    @classmethod
    def from_row(cls, row: dict) -> "EpochLog":
        f = {k: float(row[k]) for k in EPOCH_LOG_FIELDS if k != "epoch"}
        return cls(
            epoch=int(row["epoch"]),
            train=MetricRecord(f["train_iou"], f["train_f"], scope=Scope.EPOCH_MEAN),
            train_loss=f["train_loss"],
            val=MetricRecord(f["val_iou"], f["val_f"], scope=Scope.EPOCH_MEAN),
            val_loss=f["val_loss"],
            seconds=f["seconds"],
        )

    def monitored(self, metric: str) -> float:
        return {"val_iou": self.val.iou, "val_dice": self.val.f_dice, "val_loss": self.val_loss}[metric]


class EarlyStopping:
    """Tracks the best monitored value; stops after ``patience`` epochs without strict improvement."""

    def __init__(self, patience: int, mode: str = "max", best: float | None = None,
                 best_epoch: int = -1, bad_epochs: int = 0):
        if mode not in ("max", "min"):
            raise ValueError("mode must be 'max' or 'min'")
        self.patience = patience
        self.mode = mode
        self.best = best
        self.best_epoch = best_epoch
        self.bad_epochs = bad_epochs

    def update(self, epoch: int, value: float) -> bool:
        improved = not math.isnan(value) and (
            self.best is None
            or (value > self.best if self.mode == "max" else value < self.best)
        )
        if improved:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
        else:
            self.bad_epochs += 1
        return improved

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


def metric_mode(metric: str) -> str:
    return "min" if metric.endswith("loss") else "max"


def stopping_epoch(values, patience: int, mode: str = "max", max_epochs: int | None = None) -> int:
    """Index of the last epoch that would run for a given sequence of monitored values."""
    stopper = EarlyStopping(patience, mode)
    limit = len(values) if max_epochs is None else min(max_epochs, len(values))
    for epoch in range(limit):
        stopper.update(epoch, values[epoch])
        if stopper.should_stop:
            return epoch
    return limit - 1


class EpochLogWriter:
    """Append-only ``epoch_log.csv`` plus a ``epoch_log.jsonl`` mirror."""

    def __init__(self, out_dir):
        self.csv_path = Path(out_dir) / "epoch_log.csv"
        self.jsonl_path = Path(out_dir) / "epoch_log.jsonl"

    def append(self, entry: EpochLog):
        new = not self.csv_path.exists()
        row = entry.row()
        with self.csv_path.open("a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=EPOCH_LOG_FIELDS)
            if new:
                w.writeheader()
            w.writerow(row)
        with self.jsonl_path.open("a") as fh:
            fh.write(json.dumps(row) + "\n")


def read_epoch_log(path) -> list[EpochLog]:
    with Path(path).open(newline="") as fh:
        return [EpochLog.from_row(r) for r in csv.DictReader(fh)]


@dataclass
class TrainResult:
    model: UNet  # weights of the best epoch
    logs: list[EpochLog]
    state: TrainState  # state after the last completed epoch
    step_losses: list[float]
    augmented_ids: list[str] = field(default_factory=list)

    @property
    def best_epoch(self) -> int:
        return self.state.best_epoch


def load_processed(ids, data: DatasetManifest, side: int) -> dict[str, ProcessedSample]:
    return {i: process(load_sample(data.entry(i)), side) for i in ids}


def _batch_tensors(samples, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).to(dtype)
    y = torch.from_numpy(np.stack([s.onehot for s in samples])).to(dtype)
    return x.contiguous(), y


def evaluate_samples(model: UNet, samples, batch_size: int = 8) -> tuple[MetricRecord, float, list]:
    """Eval-mode pass: per-image mean IoU/F, mean per-image soft Dice, per-image records."""
    if not samples:
        return MetricRecord.mean_of([], Scope.EPOCH_MEAN), float("nan"), []
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    records, losses = [], []
    try:
        with torch.no_grad():
            for start in range(0, len(samples), batch_size):
                chunk = samples[start : start + batch_size]
                x, y = _batch_tensors(chunk, dtype)
                probs = torch.softmax(model(x).permute(0, 2, 3, 1), dim=-1)
                for k, s in enumerate(chunk):
                    losses.append(float(soft_dice_loss(probs[k], y[k])))
                    records.append(score(binarize_prediction(probs[k]), s.mask))
    finally:
        model.train(was_training)
    return MetricRecord.mean_of(records, Scope.EPOCH_MEAN), float(np.mean(losses)), records


def train(
    model: UNet,
    splits: SplitTriple,
    data: DatasetManifest,
    cfg: TrainConfig,
    *,
    side: int = TARGET_SIDE,
    out_dir=None,
    resume: TrainState | None = None,
    augment_fn: Callable = augment,
    samples: dict[str, ProcessedSample] | None = None,
) -> TrainResult:
    """Train ``model`` in place and return the best-epoch weights plus logs.

    Augmentation touches training samples only. Each epoch derives its own
    shuffle and augmentation generators from ``(seed, epoch)``, so a resumed
    run continues exactly where an uninterrupted one would.

    If ``out_dir`` is given, ``epoch_log.csv``/``.jsonl``, ``last.ckpt`` and
    ``best.ckpt`` are written there. ``samples`` may supply preprocessed
    samples keyed by id instead of loading them from ``data``.
    """
    if not splits.train:
        raise DataValidationError("train split is empty")
    if samples is None:
        samples = load_processed(dict.fromkeys(splits.train + splits.val), data, side)
    train_samples = [samples[i] for i in splits.train]
    val_samples = [samples[i] for i in splits.val]
    monitor = cfg.early_stop_metric
    if not val_samples:
        log.warning("validation split is empty; early stopping monitors training metrics")

    dtype = next(model.parameters()).dtype
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=ADAM_BETAS)
    state = resume or TrainState(metric_name=monitor)
    if resume is not None and resume.optimizer is not None:
        opt.load_state_dict(resume.optimizer)
    stopper = EarlyStopping(cfg.early_stop_patience, metric_mode(monitor),
                            state.best_metric, state.best_epoch, state.bad_epochs)
    best_weights = copy.deepcopy(model.state_dict())

    writer = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        writer = EpochLogWriter(out_dir)

    logs: list[EpochLog] = []
    step_losses: list[float] = []
    augmented: list[str] = []

    for epoch in range(state.epoch + 1, cfg.max_epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_samples))
        aug_rng = np.random.default_rng([cfg.augment.seed, epoch])
        model.train()
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = []
            for k in order[start : start + cfg.batch_size]:
                s = train_samples[k]
                augmented.append(s.id)
                batch.append(augment_fn(s, cfg.augment, aug_rng))
            x, y = _batch_tensors(batch, dtype)
            probs = torch.softmax(model(x).permute(0, 2, 3, 1), dim=-1)
            loss = soft_dice_loss(probs, y)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step_losses.append(float(loss.detach()))

        train_rec, train_loss, _ = evaluate_samples(model, train_samples, cfg.batch_size)
        if val_samples:
            val_rec, val_loss, _ = evaluate_samples(model, val_samples, cfg.batch_size)
        else:
            val_rec, val_loss = train_rec, train_loss
        entry = EpochLog(epoch, train_rec, train_loss, val_rec, val_loss, time.perf_counter() - t0)
        logs.append(entry)
        if writer:
            writer.append(entry)

        if stopper.update(epoch, entry.monitored(monitor)):
            best_weights = copy.deepcopy(model.state_dict())
        state = TrainState(epoch, stopper.best, stopper.best_epoch, stopper.bad_epochs, monitor,
                           optimizer=opt.state_dict())
        log.info("epoch %d  train iou %.4f f %.4f loss %.4f | val iou %.4f f %.4f loss %.4f",
                 epoch, train_rec.iou, train_rec.f_dice, train_loss, val_rec.iou, val_rec.f_dice, val_loss)
        if out_dir is not None:
            save_checkpoint(model, state, out_dir / "last.ckpt")
            if stopper.best_epoch == epoch:
                save_checkpoint(model, state, out_dir / "best.ckpt")
        if stopper.should_stop:
            log.info("early stop at epoch %d (best %s=%.4f at epoch %d)",
                     epoch, monitor, stopper.best, stopper.best_epoch)
            break

    best = copy.deepcopy(model)
    best.load_state_dict(best_weights)
    return TrainResult(best, logs, state, step_losses, augmented)
