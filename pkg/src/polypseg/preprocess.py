"""Resize / normalize / one-hot encoding, and joint image-mask augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .dataset_io import RawSample
from .errors import DataValidationError

TARGET_SIDE = 256


@dataclass
class ProcessedSample:
    id: str
    image: np.ndarray  # S x S x 3 float32 in [0, 1]
    mask: np.ndarray  # S x S uint8 in {0, 1}
    onehot: np.ndarray  # S x S x 2 float32, channel 0 background, 1 polyp


@dataclass(frozen=True)
class AugmentPolicy:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    rot_degrees: float = 15.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    seed: int = 0

    def __post_init__(self):
        for name in ("p_hflip", "p_vflip"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise DataValidationError(f"{name} must be in [0, 1], got {p}")
        if self.rot_degrees < 0:
            raise DataValidationError("rot_degrees is a symmetric half-range and must be >= 0")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise DataValidationError(f"scale_range must be positive and ordered, got {self.scale_range}")
        object.__setattr__(self, "scale_range", (float(lo), float(hi)))


@dataclass(frozen=True)
class AugmentDraw:
    """One realized set of augmentation parameters."""

    hflip: bool = False
    vflip: bool = False
    angle: float = 0.0  # degrees, counter-clockwise
    scale: float = 1.0

    @property
    def is_identity(self) -> bool:
        return not (self.hflip or self.vflip) and self.angle == 0.0 and self.scale == 1.0


def resize_pair(sample: RawSample, side: int = TARGET_SIDE) -> RawSample:
    """Bicubic resize for the image, nearest-neighbour for the mask."""
    if side < 32:
        raise DataValidationError(f"side must be >= 32, got {side}")
    if sample.image.shape[:2] != sample.mask.shape:
        raise DataValidationError(f"{sample.id}: image and mask sizes differ")
    if sample.mask.shape == (side, side):
        return RawSample(sample.id, sample.image.copy(), sample.mask.copy())
    image = Image.fromarray(sample.image, "RGB").resize((side, side), Image.BICUBIC)
    mask = Image.fromarray(sample.mask.astype(np.uint8), "L").resize((side, side), Image.NEAREST)
    return RawSample(sample.id, np.asarray(image).copy(), np.asarray(mask).copy())


def normalize(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.size and (image.min() < 0 or image.max() > 255):
        raise DataValidationError("image values must lie in [0, 255]")
    return image.astype(np.float32) / np.float32(255.0)


def one_hot(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise DataValidationError("mask must be binary (0/1)")
    fg = mask.astype(np.float32)
    return np.stack([1.0 - fg, fg], axis=-1)


def process(sample: RawSample, side: int = TARGET_SIDE) -> ProcessedSample:
    """Resize, normalize and one-hot encode a raw sample."""
    r = resize_pair(sample, side)
    mask = r.mask.astype(np.uint8)
    return ProcessedSample(r.id, normalize(r.image), mask, one_hot(mask))


def sample_draw(policy: AugmentPolicy, rng: np.random.Generator) -> AugmentDraw:
    # fixed draw order keeps streams comparable across policies
    u_h, u_v = rng.random(2)
    angle = rng.uniform(-policy.rot_degrees, policy.rot_degrees)
    lo, hi = policy.scale_range
    scale = rng.uniform(lo, hi)
    return AugmentDraw(
        hflip=bool(u_h < policy.p_hflip),
        vflip=bool(u_v < policy.p_vflip),
        angle=float(angle) if policy.rot_degrees > 0 else 0.0,
        scale=float(scale) if lo != hi else lo,
    )


def _affine(x: torch.Tensor, angle: float, scale: float, mode: str, padding: str) -> torch.Tensor:
    # output pixel p samples input at R(-angle) p / scale, about the image centre
    a = math.radians(angle)
    c, s = math.cos(a) / scale, math.sin(a) / scale
    theta = torch.tensor([[c, -s, 0.0], [s, c, 0.0]], dtype=x.dtype).unsqueeze(0)
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode=mode, padding_mode=padding, align_corners=False)


def apply_draw(sample: ProcessedSample, draw: AugmentDraw) -> ProcessedSample:
    """Apply one geometric draw jointly to image, mask and one-hot target."""
    if draw.is_identity:
        return replace(sample, image=sample.image.copy(), mask=sample.mask.copy(),
                       onehot=sample.onehot.copy())
    image, mask = sample.image, sample.mask
    if draw.hflip:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if draw.vflip:
        image, mask = image[::-1], mask[::-1]

    if draw.angle != 0.0 or draw.scale != 1.0:
        img_t = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)[None]
        msk_t = torch.from_numpy(np.ascontiguousarray(mask, dtype=np.float32))[None, None]
        # sampling grid keeps the input size, so output stays S x S
        img_t = _affine(img_t, draw.angle, draw.scale, "bicubic", "border").clamp_(0.0, 1.0)
        msk_t = _affine(msk_t, draw.angle, draw.scale, "nearest", "zeros")
        image = img_t[0].permute(1, 2, 0).numpy()
        mask = msk_t[0, 0].numpy()

    mask = (np.asarray(mask) > 0.5).astype(np.uint8)
    image = np.ascontiguousarray(image, dtype=np.float32)
    return ProcessedSample(sample.id, image, mask, one_hot(mask))


def augment(sample: ProcessedSample, policy: AugmentPolicy, rng: np.random.Generator) -> ProcessedSample:
    return apply_draw(sample, sample_draw(policy, rng))
