"""Held-out evaluation, qualitative panels and metric tables."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from PIL import Image

from .dataset_io import DatasetManifest, load_sample
from .errors import ArtifactIOError, DataValidationError
from .gradcam import Heatmap, colorize
from .metrics import binarize_prediction, dice_f, iou
from .preprocess import TARGET_SIDE, ProcessedSample, process
from .trainer import EPOCH_LOG_FIELDS, EpochLog
from .unet import REFERENCE_GFLOPS, REFERENCE_PARAMS, UNet, complexity

SELECTED_EPOCHS = (0, 10, 20, 30, 40)
PRED_COLOR = np.array([0, 255, 0], dtype=np.float64)


@dataclass
class TestReport:
    per_image: list[tuple[str, float, float]]
    mean_iou: float
    mean_f: float
    n: int
    model_params: int = 0
    model_flops: int = 0
    model_macs: int = 0
    predictions: dict = field(default_factory=dict, repr=False)

    __test__ = False  # not a pytest class


def model_predictor(model: UNet) -> Callable[[np.ndarray], np.ndarray]:
    """Wrap a model as ``image (S x S x 3) -> probs (S x S x 2)``."""
    dtype = next(model.parameters()).dtype

    def predict(image: np.ndarray) -> np.ndarray:
        x = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)[None].to(dtype)
        with torch.no_grad():
            return torch.softmax(model(x), dim=1)[0].permute(1, 2, 0).numpy()

    return predict


def evaluate(
    model: UNet | None,
    test_ids: Sequence[str],
    data: DatasetManifest,
    *,
    side: int = TARGET_SIDE,
    predictor: Callable[[np.ndarray], np.ndarray] | None = None,
    keep_predictions: bool = False,
) -> TestReport:
    """Per-image thresholded IoU / Dice-F over ``test_ids`` and their means.

    ``predictor`` overrides the model's forward pass; it receives one
    preprocessed image and must return per-pixel (background, polyp) probs.
    """
    if not test_ids:
        raise DataValidationError("test split is empty")
    if predictor is None:
        if model is None:
            raise DataValidationError("either a model or a predictor is required")
        model.eval()
        predictor = model_predictor(model)

    per_image, preds = [], {}
    for id_ in test_ids:
        try:
            entry = data.entry(id_)
        except DataValidationError as exc:
            raise ArtifactIOError(f"missing sample {id_!r}: {exc}") from exc
        sample = process(load_sample(entry), side)
        mask = binarize_prediction(predictor(sample.image))
        per_image.append((id_, iou(mask, sample.mask), dice_f(mask, sample.mask)))
        if keep_predictions:
            preds[id_] = mask

    report = TestReport(
        per_image=per_image,
        mean_iou=float(np.mean([r[1] for r in per_image])),
        mean_f=float(np.mean([r[2] for r in per_image])),
        n=len(per_image),
        predictions=preds,
    )
    if model is not None:
        c = complexity(model, (1, model.config.in_channels, side, side))
        report.model_params, report.model_flops, report.model_macs = c.params, c.flops, c.macs
    return report


# -- panels -----------------------------------------------------------------


def _rgb_u8(image: np.ndarray) -> np.ndarray:
    if np.issubdtype(image.dtype, np.floating):
        return np.floor(np.clip(image, 0, 1) * 255 + 0.5).astype(np.uint8)
    return image.astype(np.uint8)


def _mask_tile(mask: np.ndarray) -> np.ndarray:
    return np.repeat((np.asarray(mask, dtype=np.uint8) * 255)[..., None], 3, axis=2)


def prediction_overlay(image: np.ndarray, mask: np.ndarray, alpha: float = 0.4) -> np.ndarray:
    img = _rgb_u8(image).astype(np.float64)
    m = np.asarray(mask, dtype=bool)[..., None]
    out = np.where(m, (1 - alpha) * img + alpha * PRED_COLOR, img)
    return np.floor(out + 0.5).astype(np.uint8)


def heatmap_overlay(image: np.ndarray, heatmap: Heatmap, alpha: float = 0.5) -> np.ndarray:
    img = _rgb_u8(image).astype(np.float64)
    out = (1 - alpha) * img + alpha * colorize(heatmap.values).astype(np.float64)
    return np.floor(out + 0.5).astype(np.uint8)


def compose_panel(sample: ProcessedSample, prediction: np.ndarray, heatmap: Heatmap | None = None) -> np.ndarray:
    """Tiles left to right: original | ground truth | prediction | prediction overlay [| Grad-CAM]."""
    tiles = [
        _rgb_u8(sample.image),
        _mask_tile(sample.mask),
        _mask_tile(prediction),
        prediction_overlay(sample.image, prediction),
    ]
    if heatmap is not None:
        tiles.append(heatmap_overlay(sample.image, heatmap))
    shapes = {t.shape for t in tiles}
    if len(shapes) != 1:
        raise DataValidationError(f"panel tiles differ in shape: {shapes}")
    return np.concatenate(tiles, axis=1)


def render_panels(samples, predictions, heatmaps=None, out_dir=".") -> list[Path]:
    """Write one ``<id>.png`` composite per sample into ``out_dir``."""
    heatmaps = list(heatmaps) if heatmaps is not None else [None] * len(samples)
    if not len(samples) == len(predictions) == len(heatmaps):
        raise DataValidationError("samples, predictions and heatmaps must align")
    out_dir = Path(out_dir)
    paths = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for s, p, h in zip(samples, predictions, heatmaps):
            path = out_dir / f"{s.id}.png"
            Image.fromarray(compose_panel(s, p, h), "RGB").save(path, format="PNG")
            paths.append(path)
    except OSError as exc:
        raise ArtifactIOError(f"cannot write panels to {out_dir}: {exc}") from exc
    return paths


def split_panel(panel: np.ndarray, n_tiles: int) -> list[np.ndarray]:
    return np.split(panel, n_tiles, axis=1)


# -- tables -----------------------------------------------------------------


def selected_epochs(logs: Sequence[EpochLog]) -> list[EpochLog]:
    """Rows at epochs 0, 10, 20, 30, 40 (when present) and the last epoch."""
    last = logs[-1].epoch
    wanted = {e for e in SELECTED_EPOCHS if e <= last} | {last}
    return [l for l in logs if l.epoch in wanted]


def _write_csv(path: Path, fields, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        w.writerows(rows)


def write_test_report(report: TestReport, out_dir) -> Path:
    path = Path(out_dir) / "test_report.csv"
    _write_csv(path, ("id", "iou", "f_dice"), [(i, f"{a:.6f}", f"{b:.6f}") for i, a, b in report.per_image])
    return path


def write_summary(report: TestReport | None, out_dir, logs: Sequence[EpochLog] = ()) -> Path:
    lines = []
    if report is not None:
        lines += [
            f"n_test: {report.n}",
            f"mean_iou: {report.mean_iou:.6f}",
            f"mean_f: {report.mean_f:.6f}",
            f"params: {report.model_params}",
            f"flops: {report.model_flops}",
            f"macs: {report.model_macs}",
            f"gflops: {report.model_flops / 1e9:.3f}",
            f"gmacs: {report.model_macs / 1e9:.3f}",
            f"reference_params: {REFERENCE_PARAMS}",
            f"reference_gflops: {REFERENCE_GFLOPS}",
        ]
    if logs:
        lines.append(f"epochs_run: {len(logs)}")
        lines.append(f"last_epoch: {logs[-1].epoch}")
    path = Path(out_dir) / "summary.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def export_tables(logs: Sequence[EpochLog], report: TestReport | None, out_dir) -> list[Path]:
    """Write ``epoch_log.csv``, ``selected_epochs.csv``, ``test_report.csv`` and ``summary.txt``."""
    if not logs:
        raise DataValidationError("epoch log is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, rows in (("epoch_log.csv", logs), ("selected_epochs.csv", selected_epochs(logs))):
        p = out_dir / name
        _write_csv(p, EPOCH_LOG_FIELDS, [[l.row()[k] for k in EPOCH_LOG_FIELDS] for l in rows])
        paths.append(p)
    if report is not None:
        paths.append(write_test_report(report, out_dir))
    paths.append(write_summary(report, out_dir, logs))
    return paths
