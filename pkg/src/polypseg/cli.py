"""``polypseg`` command line: synth, prepare, train, eval, explain.

Exit codes: 0 ok, 2 config error, 3 data validation error, 4 runtime or
numeric error, 5 I/O error. Failures print one ``error=<Class> exit=<code>
msg=<text>`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .checkpoint import load_checkpoint
from .config import RunConfig, load_config
from .dataset_io import (
    DatasetManifest,
    SplitTriple,
    generate_synthetic,
    load_sample,
    read_split_file,
    scan_dataset,
    split_manifest,
    write_split_file,
)
from .errors import ArtifactIOError, DataValidationError, PolypSegError
from .gradcam import gradcam, overlay, save_heatmap, save_overlay
from .metrics import binarize_prediction
from .preprocess import process
from .report import evaluate, export_tables, model_predictor, render_panels, write_summary, write_test_report
from .trainer import read_epoch_log, train
from .unet import build_unet

log = logging.getLogger("polypseg")

SPLIT_FILE = "splits.txt"
MANIFEST_FILE = "manifest.json"


def write_run_meta(cfg: RunConfig | None, command: str, out_dir: Path, extra=None):
    """Merge this command's metadata into ``<out>/run_meta.json``."""
    path = out_dir / "run_meta.json"
    meta = {}
    if path.exists():
        try:
            meta = json.loads(path.read_text())
        except (OSError, ValueError):
            meta = {}
    entry = {"version": __version__, **(extra or {})}
    if cfg is not None:
        entry.update(
            config_hash=cfg.digest(),
            seeds={
                "split": cfg.split.seed,
                "model": cfg.model.seed,
                "train": cfg.train.seed,
                "augment": cfg.augment.seed,
            },
        )
    meta[command] = entry
    out_dir.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def write_manifest(manifest: DatasetManifest, path: Path):
    doc = {
        "root": str(manifest.root),
        "checksum": manifest.checksum,
        "entries": [
            {"id": e.id, "image": str(e.image_path), "mask": str(e.mask_path)} for e in manifest.entries
        ],
    }
    path.write_text(json.dumps(doc, indent=2) + "\n")


def resolve_split(cfg: RunConfig, manifest: DatasetManifest) -> SplitTriple:
    """Read ``splits.txt`` from the run dir, or create it if absent."""
    path = cfg.output_dir / SPLIT_FILE
    if path.exists():
        split, checksum = read_split_file(path)
        if checksum != manifest.checksum:
            raise DataValidationError(
                f"{path} was made for manifest {checksum[:12]}, dataset is {manifest.checksum[:12]}; rerun prepare"
            )
        return split
    split = split_manifest(manifest, cfg.split.seed)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    write_split_file(split, manifest, path)
    return split


def cmd_synth(args) -> int:
    manifest = generate_synthetic(args.n, args.size, args.seed, args.out)
    write_run_meta(None, "synth", Path(args.out), {"n": args.n, "size": args.size, "seed": args.seed})
    print(f"wrote {len(manifest)} pairs to {args.out} (checksum {manifest.checksum[:12]})")
    return 0


def cmd_prepare(cfg: RunConfig, args) -> int:
    manifest = scan_dataset(cfg.dataset_root)
    split = split_manifest(manifest, cfg.split.seed)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(manifest, out / MANIFEST_FILE)
    write_split_file(split, manifest, out / SPLIT_FILE)
    (out / "config.yaml").write_text(cfg.dump())
    write_run_meta(cfg, "prepare", out, {"manifest_checksum": manifest.checksum})
    n_tr, n_va, n_te = split.sizes()
    print(f"{len(manifest)} samples -> train {n_tr} / val {n_va} / test {n_te}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    manifest = scan_dataset(cfg.dataset_root)
    split = resolve_split(cfg, manifest)
    out = cfg.output_dir
    resume = None
    if args.checkpoint:
        model, resume = load_checkpoint(args.checkpoint)
    else:
        model = build_unet(cfg.model)
    (out / "config.yaml").write_text(cfg.dump())
    write_run_meta(cfg, "train", out)
    result = train(model, split, manifest, cfg.train, side=cfg.preprocess.side, out_dir=out, resume=resume)
    if result.logs:
        print(f"trained {len(result.logs)} epoch(s); best {result.state.metric_name}="
              f"{result.state.best_metric:.4f} at epoch {result.best_epoch}")
    return 0


def _checkpoint_path(cfg: RunConfig, args) -> Path:
    return Path(args.checkpoint) if args.checkpoint else cfg.output_dir / "best.ckpt"


def cmd_eval(cfg: RunConfig, args) -> int:
    model, _ = load_checkpoint(_checkpoint_path(cfg, args))
    manifest = scan_dataset(cfg.dataset_root)
    split = resolve_split(cfg, manifest)
    report = evaluate(model, split.test, manifest, side=cfg.preprocess.side)
    out = cfg.output_dir
    epoch_log = out / "epoch_log.csv"
    if epoch_log.exists() and (logs := read_epoch_log(epoch_log)):
        export_tables(logs, report, out)
    else:
        write_test_report(report, out)
        write_summary(report, out)
    write_run_meta(cfg, "eval", out, {"checkpoint": str(_checkpoint_path(cfg, args))})
    print(f"test n={report.n} mean_iou={report.mean_iou:.4f} mean_f={report.mean_f:.4f}")
    return 0


def cmd_explain(cfg: RunConfig, args) -> int:
    manifest = scan_dataset(cfg.dataset_root)
    model, _ = load_checkpoint(_checkpoint_path(cfg, args))
    model.eval()
    if args.ids:
        ids = [i for i in args.ids.split(",") if i]
    else:
        ids = resolve_split(cfg, manifest).test[:4]
    if not ids:
        raise DataValidationError("no ids to explain")
    out = cfg.output_dir
    predict = model_predictor(model)
    samples, preds, maps = [], [], []
    for id_ in ids:
        sample = process(load_sample(manifest.entry(id_)), cfg.preprocess.side)
        heat = gradcam(model, sample.image)
        save_heatmap(heat, out / "cam" / f"{id_}.png")
        save_overlay(overlay(sample.image, heat), out / "cam" / f"{id_}_overlay.png")
        samples.append(sample)
        preds.append(binarize_prediction(predict(sample.image)))
        maps.append(heat)
    render_panels(samples, preds, maps, out / "panels")
    write_run_meta(cfg, "explain", out, {"ids": ids})
    print(f"wrote Grad-CAM heatmaps and panels for {len(ids)} sample(s) under {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polypseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic Kvasir-SEG style dataset")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    for name, helptext in (
        ("prepare", "scan the dataset and write manifest + split files"),
        ("train", "train a U-Net and write checkpoints and epoch logs"),
        ("eval", "evaluate a checkpoint on the test split"),
        ("explain", "Grad-CAM heatmaps, overlays and panels for chosen ids"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. train.lr=1e-3 (repeatable)")
        if name in ("train", "eval", "explain"):
            p.add_argument("--checkpoint", help="checkpoint path (train: resume from it)")
        if name == "explain":
            p.add_argument("--ids", help="comma-separated sample ids (default: first test ids)")
    return parser


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "eval": cmd_eval, "explain": cmd_explain}


def _fail(exc: BaseException, code: int) -> int:
    msg = " ".join(str(exc).split()) or exc.__class__.__name__
    print(f"error={exc.__class__.__name__} exit={code} msg={msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "synth":
            return cmd_synth(args)
        cfg = load_config(args.config, args.overrides)
        return COMMANDS[args.command](cfg, args)
    except PolypSegError as exc:
        return _fail(exc, exc.exit_code)
    except OSError as exc:
        return _fail(ArtifactIOError(str(exc)), ArtifactIOError.exit_code)
    except Exception as exc:  # noqa: BLE001 - every failure maps to an exit code
        log.debug("unhandled error", exc_info=True)
        return _fail(exc, 4)


if __name__ == "__main__":
    sys.exit(main())
