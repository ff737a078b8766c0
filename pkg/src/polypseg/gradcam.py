"""Grad-CAM heatmaps for the polyp class, overlays and attention coverage.

The target scalar is the sum of polyp-channel logits over pixels predicted as
polyp (all pixels when nothing is predicted). Channel weights are spatial
means of its gradient at the chosen tap; the map is ReLU of the weighted
activation sum, bilinearly resized to the input and min-max normalized.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ArtifactIOError, CapabilityError, DataValidationError, TapLookupError

POLYP = 1


@dataclass
class Heatmap:
    values: np.ndarray  # H x W in [0, 1]
    source_tap: str
    target: str = "polyp"


@dataclass
class OverlayImage:
    rgb: np.ndarray  # H x W x 3 uint8
    alpha: float


class Coverage(NamedTuple):
    fraction: float
    degenerate: bool


@lru_cache(maxsize=1)
def colormap() -> np.ndarray:
    """The bundled 256 x 3 uint8 blue-green-red lookup table."""
    with resources.files(__package__).joinpath("colormap.csv").open() as fh:
        rows = [[int(v) for v in r] for r in list(csv.reader(fh))[1:]]
    table = np.array(rows, dtype=np.uint8)
    assert table.shape == (256, 3)
    return table


def _as_nchw(image) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(image) if not isinstance(image, torch.Tensor) else image)
    if x.ndim != 3 or x.shape[-1] != 3:
        raise DataValidationError(f"expected H x W x 3 image, got {tuple(x.shape)}")
    return x.permute(2, 0, 1)[None].contiguous()


def default_tap(model) -> str:
    return getattr(model, "last_decoder_tap", None) or list(model.tap_names)[-1]


def cam_at_tap(model, image, tap: str | None = None) -> tuple[torch.Tensor, str]:
    """Unnormalized Grad-CAM map at the tap's own resolution (h x w)."""
    tap = tap or default_tap(model)
    names = list(getattr(model, "tap_names", []))
    if names and tap not in names:
        raise TapLookupError(f"unknown tap {tap!r}; available: {', '.join(names)}")

    dtype = next(model.parameters()).dtype
    x = _as_nchw(image).to(dtype)
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            logits, acts = model.forward_with_taps(x)
            if tap not in acts:
                raise TapLookupError(f"unknown tap {tap!r}; available: {', '.join(acts)}")
            a = acts[tap]
            if not a.requires_grad:
                raise CapabilityError(f"activation at tap {tap!r} does not carry gradients")
            fg = (logits[:, POLYP] > logits[:, 0]).detach()
            polyp = logits[:, POLYP]
            y = polyp[fg].sum() if bool(fg.any()) else polyp.sum()
            (grad,) = torch.autograd.grad(y, a, allow_unused=True)
    finally:
        model.train(was_training)
    if grad is None:
        grad = torch.zeros_like(a)

    weights = grad.mean(dim=(2, 3), keepdim=True)
    cam = torch.relu((weights * a).sum(dim=1))[0]
    return cam.detach(), tap


def upsample_cam(cam: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if tuple(cam.shape) == tuple(size):
        return cam
    return F.interpolate(cam[None, None], size=size, mode="bilinear", align_corners=False)[0, 0]


def minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= 0:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def gradcam(model, image, tap: str | None = None) -> Heatmap:
    """Grad-CAM heatmap for one H x W x 3 image (values in [0, 1])."""
    cam, tap = cam_at_tap(model, image, tap)
    h, w = np.asarray(image).shape[:2]
    up = upsample_cam(cam, (h, w)).cpu().numpy().astype(np.float64)
    return Heatmap(values=np.clip(minmax(up), 0.0, 1.0), source_tap=tap)


def _image_u8(image) -> np.ndarray:
    image = np.asarray(image)
    if np.issubdtype(image.dtype, np.floating):
        image = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5)
    return image.astype(np.uint8)


def colorize(values: np.ndarray) -> np.ndarray:
    idx = np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.intp)
    return colormap()[idx]


def overlay(image, heatmap: Heatmap, alpha: float = 0.5) -> OverlayImage:
    """Blend ``(1 - alpha) * image + alpha * colormap(heatmap)``, rounded to uint8."""
    img = _image_u8(image)
    if img.shape[:2] != heatmap.values.shape or img.ndim != 3:
        raise DataValidationError(f"image {img.shape} and heatmap {heatmap.values.shape} do not align")
    if not 0.0 <= alpha <= 1.0:
        raise DataValidationError(f"alpha must be in [0, 1], got {alpha}")
    out = (1.0 - alpha) * img.astype(np.float64) + alpha * colorize(heatmap.values).astype(np.float64)
    return OverlayImage(np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8), alpha)


def attention_coverage(heatmap: Heatmap, gt_mask) -> Coverage:
    """Fraction of total heatmap mass inside the ground-truth polyp region."""
    gt = np.asarray(gt_mask).astype(bool)
    if gt.shape != heatmap.values.shape:
        raise DataValidationError(f"mask {gt.shape} and heatmap {heatmap.values.shape} do not align")
    if not gt.any():
        raise DataValidationError("attention coverage is undefined for an empty ground-truth mask")
    total = float(heatmap.values.sum())
    if total <= 0:
        return Coverage(0.0, True)
    return Coverage(float(heatmap.values[gt].sum()) / total, False)


def heatmap_to_u8(heatmap: Heatmap) -> np.ndarray:
    return np.floor(np.clip(heatmap.values, 0, 1) * 255.0 + 0.5).astype(np.uint8)


def save_heatmap(heatmap: Heatmap, path) -> Path:
    return _save(Image.fromarray(heatmap_to_u8(heatmap), "L"), path)


def save_overlay(ov: OverlayImage, path) -> Path:
    return _save(Image.fromarray(ov.rgb, "RGB"), path)


def _save(im: Image.Image, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        im.save(path, format="PNG")
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc
    return path
