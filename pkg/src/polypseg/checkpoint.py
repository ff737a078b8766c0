"""Single-file checkpoint archive: config + parameters + training state.

Layout (zip, stored uncompressed)::

    config.json    UNetConfig fields
    state.json     epoch, best metric, ... (JSON-safe training metadata)
    tensors.pt     {"model": state_dict, "optimizer": state_dict | None}
    SHA256SUMS     digests of the three members above
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .errors import CheckpointError
from .unet import UNet, UNetConfig

MEMBERS = ("config.json", "state.json", "tensors.pt")
FORMAT_VERSION = 1


@dataclass
class TrainState:
    epoch: int = -1  # last completed epoch
    best_metric: float | None = None
    best_epoch: int = -1
    bad_epochs: int = 0
    metric_name: str = "val_iou"
    optimizer: dict | None = field(default=None, repr=False)

    def meta(self) -> dict:
        d = asdict(self)
        d.pop("optimizer")
        return d


def save_checkpoint(model: UNet, state: TrainState | None, path) -> Path:
    path = Path(path)
    state = state or TrainState()
    buf = io.BytesIO()
    torch.save({"model": model.state_dict(), "optimizer": state.optimizer}, buf)
    payload = {
        "config.json": json.dumps(model.config.to_dict(), indent=2, sort_keys=True).encode(),
        "state.json": json.dumps({"format": FORMAT_VERSION, **state.meta()}, indent=2, sort_keys=True).encode(),
        "tensors.pt": buf.getvalue(),
    }
    sums = "".join(f"{hashlib.sha256(payload[m]).hexdigest()}  {m}\n" for m in MEMBERS)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
            for name in MEMBERS:
                zf.writestr(name, payload[name])
            zf.writestr("SHA256SUMS", sums)
        tmp.replace(path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path, map_location="cpu") -> tuple[UNet, TrainState]:
    """Load and verify a checkpoint. Nothing is returned unless every digest matches."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            payload = {m: zf.read(m) for m in MEMBERS}
            sums = zf.read("SHA256SUMS").decode()
    except (zipfile.BadZipFile, KeyError, OSError, EOFError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc

    expected = {}
    for line in sums.splitlines():
        digest, _, name = line.partition("  ")
        expected[name] = digest
    for m in MEMBERS:
        if hashlib.sha256(payload[m]).hexdigest() != expected.get(m):
            raise CheckpointError(f"checksum mismatch for {m} in {path}")

    try:
        cfg = json.loads(payload["config.json"])
        cfg["encoder_widths"] = tuple(cfg["encoder_widths"])
        meta = json.loads(payload["state.json"])
        tensors = torch.load(io.BytesIO(payload["tensors.pt"]), map_location=map_location, weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint contents in {path}: {exc}") from exc

    model = UNet(UNetConfig(**cfg))
    first = next(iter(tensors["model"].values()), None)
    if first is not None and first.is_floating_point():
        model.to(first.dtype)
    model.load_state_dict(tensors["model"])
    meta.pop("format", None)
    state = TrainState(**meta, optimizer=tensors.get("optimizer"))
    return model, state
