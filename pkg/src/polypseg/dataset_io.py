"""Discovery, splitting and loading of Kvasir-SEG style datasets.

A dataset root holds ``images/<id>.<ext>`` and ``masks/<id>.<ext>``. The
synthetic generator writes the same layout so every downstream stage can be
exercised without the real data.
"""

from __future__ import annotations

import hashlib
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ArtifactIOError, DataValidationError, DatasetStructureError

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png")
MASK_THRESHOLD = 127
TEST_FRACTION = 0.12
VAL_FRACTION = 0.10


class EmptySplitWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image_path: Path
    mask_path: Path


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    root: Path
    checksum: str

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def entry(self, id_: str) -> ManifestEntry:
        for e in self.entries:
            if e.id == id_:
                return e
        raise DataValidationError(f"id {id_!r} not in manifest rooted at {self.root}")

    @classmethod
    def from_entries(cls, entries, root) -> "DatasetManifest":
        entries = tuple(sorted(entries, key=lambda e: e.id))
        ids = [e.id for e in entries]
        if len(set(ids)) != len(ids):
            raise DataValidationError("duplicate ids in manifest")
        return cls(entries=entries, root=Path(root), checksum=ids_checksum(ids))


@dataclass(frozen=True)
class SplitTriple:
    train: list[str]
    val: list[str]
    test: list[str]
    seed: int

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


@dataclass
class RawSample:
    id: str
    image: np.ndarray  # H x W x 3 uint8
    mask: np.ndarray  # H x W uint8 in {0, 1}


def ids_checksum(ids) -> str:
    return hashlib.sha256("\n".join(sorted(ids)).encode("utf-8")).hexdigest()


def _index_dir(directory: Path) -> dict[str, Path]:
    found: dict[str, Path] = {}
    dupes = []
    for p in sorted(directory.iterdir()):
        if not p.is_file() or p.suffix.lower() not in IMAGE_EXTENSIONS:
            continue
        if p.stem in found:
            dupes.append(p.stem)
        found[p.stem] = p
    if dupes:
        raise DataValidationError(f"duplicate stems in {directory}: {', '.join(dupes)}")
    return found


def scan_dataset(root) -> DatasetManifest:
    """Build a manifest from ``root/images`` and ``root/masks``.

    Raises:
        DatasetStructureError: if either subdirectory is missing.
        DataValidationError: if the directories are empty or any stem lacks
            its counterpart; the message lists every offending stem.
    """
    root = Path(root)
    image_dir, mask_dir = root / "images", root / "masks"
    for d in (image_dir, mask_dir):
        if not d.is_dir():
            raise DatasetStructureError(f"missing directory: {d}")

    images = _index_dir(image_dir)
    masks = _index_dir(mask_dir)
    if not images:
        raise DataValidationError(f"no images found in {image_dir}")

    unmatched = sorted(set(images) ^ set(masks))
    if unmatched:
        raise DataValidationError(
            f"{len(unmatched)} unmatched image/mask stem(s): {', '.join(unmatched)}"
        )
    entries = [ManifestEntry(k, images[k], masks[k]) for k in images]
    return DatasetManifest.from_entries(entries, root)


def split_sizes(n: int) -> tuple[int, int, int]:
    """Return (train, val, test) counts for ``n`` samples under the floor rule."""
    n_test = math.floor(TEST_FRACTION * n)
    pool = n - n_test
    n_val = math.floor(VAL_FRACTION * pool)
    return pool - n_val, n_val, n_test


def split_manifest(manifest: DatasetManifest, seed: int) -> SplitTriple:
    n = len(manifest)
    if n < 3:
        raise DataValidationError(f"need at least 3 samples to split, got {n}")
    n_train, n_val, n_test = split_sizes(n)
    order = np.random.default_rng(seed).permutation(n)
    ids = manifest.ids  # already lexicographic
    shuffled = [ids[i] for i in order]
    test = sorted(shuffled[:n_test])
    val = sorted(shuffled[n_test : n_test + n_val])
    train = sorted(shuffled[n_test + n_val :])
    for name, part in (("train", train), ("val", val), ("test", test)):
        if not part:
            warnings.warn(f"{name} split is empty for N={n}", EmptySplitWarning, stacklevel=2)
    return SplitTriple(train=train, val=val, test=test, seed=seed)


def write_split_file(split: SplitTriple, manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    lines = [f"# seed={split.seed} checksum={manifest.checksum}"]
    for name in ("train", "val", "test"):
        lines.append(f"[{name}]")
        lines.extend(getattr(split, name))
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise ArtifactIOError(f"cannot write split file {path}: {exc}") from exc
    return path


def read_split_file(path) -> tuple[SplitTriple, str]:
    """Parse a split file; returns the split and the manifest checksum it was made from."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ArtifactIOError(f"cannot read split file {path}: {exc}") from exc

    seed, checksum = None, None
    sections: dict[str, list[str]] = {}
    current = None
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            for tok in line[1:].split():
                key, _, value = tok.partition("=")
                if key == "seed":
                    seed = int(value)
                elif key == "checksum":
                    checksum = value
        elif line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = []
        elif current is None:
            raise DataValidationError(f"{path}: id outside of a section: {line!r}")
        else:
            sections[current].append(line)
    if seed is None or checksum is None or set(sections) != {"train", "val", "test"}:
        raise DataValidationError(f"{path}: malformed split file")
    split = SplitTriple(sections["train"], sections["val"], sections["test"], seed)
    return split, checksum


def binarize_mask(mask: np.ndarray) -> np.ndarray:
    """Threshold an 8-bit grayscale mask at >127; boolean input is already binary."""
    mask = np.asarray(mask)
    if mask.dtype == bool:
        return mask
    return mask > MASK_THRESHOLD


def _open(path: Path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            return np.asarray(im.convert(mode))
    except (OSError, SyntaxError, ValueError) as exc:
        raise ArtifactIOError(f"cannot decode {path}: {exc}") from exc


def load_sample(entry: ManifestEntry) -> RawSample:
    image = _open(entry.image_path, "RGB")
    mask = binarize_mask(_open(entry.mask_path, "L")).astype(np.uint8)
    if image.shape[:2] != mask.shape:
        raise DataValidationError(
            f"{entry.id}: image {image.shape[:2]} and mask {mask.shape} sizes differ"
        )
    return RawSample(entry.id, image, mask)


# -- synthetic data ---------------------------------------------------------

FG_FRACTION_BOUNDS = (0.03, 0.45)


def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    coarse = rng.random((cells, cells)).astype(np.float32)
    im = Image.fromarray((coarse * 255).astype(np.uint8)).resize((size, size), Image.BICUBIC)
    return np.asarray(im, dtype=np.float32) / 255.0


def _ellipse_mask(size, cx, cy, a, b, theta) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    c, s = math.cos(theta), math.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    return u * u + v * v <= 1.0


def synth_pair(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw one synthetic (image uint8 HxWx3, mask uint8 HxW in {0,1}) pair."""
    lo, hi = FG_FRACTION_BOUNDS
    while True:
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(1, 4))):
            a = rng.uniform(0.08, 0.28) * size
            b = a * rng.uniform(0.6, 1.0)
            cx, cy = rng.uniform(0.2, 0.8, size=2) * size
            mask |= _ellipse_mask(size, cx, cy, a, b, rng.uniform(0, math.pi))
        frac = mask.mean()
        if lo <= frac <= hi:
            break

    # mucosa-like background: pink/orange with soft low-frequency shading
    shade = _smooth_noise(rng, size, 6)
    grain = _smooth_noise(rng, size, max(4, size // 4))
    base = np.array([0.80, 0.45, 0.35]) + rng.uniform(-0.05, 0.05, 3)
    bg = base[None, None, :] * (0.65 + 0.35 * shade[..., None]) + 0.05 * (grain[..., None] - 0.5)

    # lesions: darker red, mottled texture
    blob_tex = _smooth_noise(rng, size, max(4, size // 8))
    lesion = np.array([0.55, 0.18, 0.16]) + rng.uniform(-0.05, 0.05, 3)
    fg = lesion[None, None, :] * (0.75 + 0.5 * blob_tex[..., None])

    image = np.where(mask[..., None], fg, bg)
    image = np.clip(np.rint(image * 255), 0, 255).astype(np.uint8)
    return image, mask.astype(np.uint8)


def generate_synthetic(n: int, size: int, seed: int, out) -> DatasetManifest:
    """Write ``n`` synthetic image/mask PNG pairs under ``out`` and scan them."""
    if n < 1:
        raise DataValidationError(f"n must be >= 1, got {n}")
    if size < 32:
        raise DataValidationError(f"size must be >= 32, got {size}")
    out = Path(out)
    rng = np.random.default_rng(seed)
    width = max(4, len(str(n - 1)))
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
        for i in range(n):
            image, mask = synth_pair(rng, size)
            stem = f"synth_{i:0{width}d}"
            Image.fromarray(image, "RGB").save(out / "images" / f"{stem}.png")
            Image.fromarray(mask * 255, "L").save(out / "masks" / f"{stem}.png")
    except OSError as exc:
        raise ArtifactIOError(f"cannot write synthetic dataset to {out}: {exc}") from exc
    log.info("wrote %d synthetic pairs to %s", n, out)
    return scan_dataset(out)
