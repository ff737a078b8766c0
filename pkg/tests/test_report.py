import numpy as np
import pytest
from PIL import Image

from polypseg.dataset_io import load_sample
from polypseg.errors import ArtifactIOError, DataValidationError
from polypseg.gradcam import Heatmap
from polypseg.metrics import MetricRecord
from polypseg.preprocess import one_hot, process
from polypseg.report import (
    compose_panel,
    evaluate,
    export_tables,
    render_panels,
    selected_epochs,
    split_panel,
    write_summary,
)
from polypseg.trainer import EpochLog
from polypseg.unet import REFERENCE_PARAMS

SIDE = 32


def processed(manifest, ids):
    return [process(load_sample(manifest.entry(i)), SIDE) for i in ids]


def fake_logs(n):
    return [EpochLog(e, MetricRecord(e / n, e / n), 1 - e / n, MetricRecord(e / n, e / n), 1 - e / n, 0.1)
            for e in range(n)]


@pytest.fixture(scope="module")
def oracle_predictor(small_dataset):
    """Predicts each test image's own ground truth (lookup by image bytes)."""
    table = {s.image.tobytes(): one_hot(s.mask) for s in processed(small_dataset, small_dataset.ids)}
    return lambda image: table[image.tobytes()]


def test_perfect_predictor(small_dataset, oracle_predictor):
    rep = evaluate(None, small_dataset.ids[:5], small_dataset, side=SIDE, predictor=oracle_predictor)
    assert rep.n == 5 and rep.mean_iou == 1.0 and rep.mean_f == 1.0
    assert all(r[1] == r[2] == 1.0 for r in rep.per_image)


def test_all_background_predictor(small_dataset):
    def background(image):
        out = np.zeros(image.shape[:2] + (2,))
        out[..., 0] = 1
        return out

    rep = evaluate(None, small_dataset.ids[:5], small_dataset, side=SIDE, predictor=background)
    # every synthetic mask has foreground, so overlap is empty
    assert rep.mean_iou == 0.0 and rep.mean_f == 0.0


def test_means_match_per_image(small_dataset, toy_model):
    rep = evaluate(toy_model, small_dataset.ids, small_dataset, side=SIDE, keep_predictions=True)
    assert abs(rep.mean_iou - np.mean([r[1] for r in rep.per_image])) <= 1e-12
    assert abs(rep.mean_f - np.mean([r[2] for r in rep.per_image])) <= 1e-12
    assert rep.model_params > 0 and rep.model_flops > 2 * rep.model_macs > 0
    assert set(rep.predictions) == set(small_dataset.ids)


def test_evaluate_errors(small_dataset, toy_model):
    with pytest.raises(ArtifactIOError, match="ghost"):
        evaluate(toy_model, ["ghost"], small_dataset, side=SIDE)
    with pytest.raises(DataValidationError):
        evaluate(toy_model, [], small_dataset, side=SIDE)


def test_panel_tiles(small_dataset):
    s = processed(small_dataset, small_dataset.ids[:1])[0]
    pred = np.zeros_like(s.mask)
    pred[:8, :8] = 1
    panel = compose_panel(s, pred)
    assert panel.shape == (SIDE, 4 * SIDE, 3)
    orig, gt, pr, ov = split_panel(panel, 4)
    assert np.array_equal(orig, np.floor(s.image * 255 + 0.5).astype(np.uint8))
    assert np.array_equal(gt[..., 0] > 0, s.mask.astype(bool))
    assert np.array_equal(pr[..., 0] > 0, pred.astype(bool))
    # overlay differs from the original exactly on predicted pixels
    changed = np.any(ov != orig, axis=-1)
    assert not changed[~pred.astype(bool)].any()
    five = compose_panel(s, pred, Heatmap(np.zeros((SIDE, SIDE)), "dec1"))
    assert five.shape == (SIDE, 5 * SIDE, 3)


def test_empty_mask_tile_is_black(small_dataset):
    s = processed(small_dataset, small_dataset.ids[:1])[0]
    empty = s.__class__(s.id, s.image, np.zeros_like(s.mask), one_hot(np.zeros_like(s.mask)))
    gt = split_panel(compose_panel(empty, empty.mask), 4)[1]
    assert not gt.any()


def test_render_panels_byte_identical(tmp_path, small_dataset):
    samples = processed(small_dataset, small_dataset.ids[:3])
    preds = [s.mask for s in samples]
    a = render_panels(samples, preds, out_dir=tmp_path / "a")
    b = render_panels(samples, preds, out_dir=tmp_path / "b")
    assert [p.name for p in a] == [f"{s.id}.png" for s in samples]
    for x, y in zip(a, b):
        assert x.read_bytes() == y.read_bytes()
    with Image.open(a[0]) as im:
        assert im.size == (4 * SIDE, SIDE)
    with pytest.raises(DataValidationError):
        render_panels(samples, preds[:2], out_dir=tmp_path / "c")


def test_selected_epochs():
    assert [l.epoch for l in selected_epochs(fake_logs(50))] == [0, 10, 20, 30, 40, 49]
    assert [l.epoch for l in selected_epochs(fake_logs(5))] == [0, 4]
    assert [l.epoch for l in selected_epochs(fake_logs(11))] == [0, 10]
    assert [l.epoch for l in selected_epochs(fake_logs(1))] == [0]


def test_export_tables(tmp_path, small_dataset, toy_model):
    rep = evaluate(toy_model, small_dataset.ids[:3], small_dataset, side=SIDE)
    paths = export_tables(fake_logs(50), rep, tmp_path)
    assert {p.name for p in paths} == {"epoch_log.csv", "selected_epochs.csv", "test_report.csv", "summary.txt"}
    assert len((tmp_path / "selected_epochs.csv").read_text().splitlines()) == 1 + 6
    assert len((tmp_path / "test_report.csv").read_text().splitlines()) == 1 + 3
    summary = dict(l.split(": ") for l in (tmp_path / "summary.txt").read_text().splitlines())
    assert summary["n_test"] == "3" and int(summary["params"]) == rep.model_params
    assert int(summary["reference_params"]) == REFERENCE_PARAMS
    assert float(summary["mean_iou"]) == pytest.approx(rep.mean_iou, abs=1e-6)
    with pytest.raises(DataValidationError):
        export_tables([], rep, tmp_path)


def test_summary_without_report(tmp_path):
    text = write_summary(None, tmp_path, fake_logs(3)).read_text()
    assert "epochs_run: 3" in text and "mean_iou" not in text
