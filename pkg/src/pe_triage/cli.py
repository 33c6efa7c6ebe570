"""Command-line entry point: ``pe-triage <command> ...``.

Exit codes: 0 success, 1 data or runtime error, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, gradcam, nn
from .config import ConfigError, RunConfig
from .dicom import DicomError, load_series, read_dicom, to_hu
from .labels import STAGE1_CLASSES, STAGE2_CLASSES, SliceLabel
from .model import CbamdrnModel, UnknownLayer, WindowSetMismatch, predict_batch
from .phantom import generate_patient, write_dicom, write_sidecar
from .preprocess import preprocess_slice
from .training import EmptyDataset, dataset_from_manifest, for_stage, infer_logits, train
from .triage import (
    DatasetManifest,
    ManifestError,
    ManifestRow,
    Split,
    compute_metrics,
    split_dataset,
    triage_patient,
    triage_slice,
)

log = logging.getLogger("pe_triage")

EXIT_OK, EXIT_DATA, EXIT_USAGE = 0, 1, 2

# flags that map straight onto RunConfig keys
_OVERRIDE_FLAGS = ("mode", "epochs", "batch_size", "lr", "seed", "jobs")


class DataError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# helpers


def _run_config(args) -> RunConfig:
    overrides = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    for key in _OVERRIDE_FLAGS:
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return RunConfig.load(getattr(args, "config", None), overrides)


def _stage_classes(stage: int) -> tuple[str, str]:
    return STAGE1_CLASSES if stage == 1 else STAGE2_CLASSES


def _load_model(path: str, cfg: RunConfig) -> CbamdrnModel:
    return CbamdrnModel.load(path, cfg.model_config(), cfg.mode)


def _manifest(path: str) -> DatasetManifest:
    if not Path(path).is_file():
        raise DataError(f"manifest {path} not found")
    return DatasetManifest.read(path)


def _png(values: np.ndarray, path: Path) -> None:
    gray = (np.asarray(values, dtype=np.float64) + 1.0) / 2.0
    gradcam.save_png(gradcam.to_uint8(gray), path)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")


# --------------------------------------------------------------------------
# commands


def cmd_phantom_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    counts = {SliceLabel.PE: args.pe, SliceLabel.OTHER: args.other, SliceLabel.WNL: args.wnl}
    if sum(counts.values()) == 0:
        raise ConfigError("no patients requested")
    patients = []
    for label, n in counts.items():
        patients += [label] * n
    rows: list[ManifestRow] = []
    for k, label in enumerate(patients):
        pid = f"P{k:04d}"
        pseed = args.seed * 1_000_003 + k
        pdir = out / pid
        pdir.mkdir(exist_ok=True)
        series = f"1.2.826.0.1.{args.seed}.{k}"
        for i, (hu, truth) in enumerate(generate_patient(pseed, label, args.slices, (args.size, args.size))):
            path = write_dicom(hu, pid, series, i + 1, pdir / f"slice_{i:03d}.dcm")
            write_sidecar(truth, path.with_suffix(".gt"))
            rows.append(ManifestRow(str(path.relative_to(out)), pid, truth.label))
    manifest = DatasetManifest(rows)
    if args.split:
        ratios = tuple(float(v) for v in args.split.split(","))
        manifest = manifest.with_splits(split_dataset(manifest.patients(), ratios, args.seed))
    manifest.write(out / "manifest.tsv")
    log.info("wrote %d patients, %d slices to %s", len(patients), len(rows), out)
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = _run_config(args)
    pcfg = cfg.preprocess_config()
    manifest = _manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    windows = args.windows.split(",") if args.windows else list(CbamdrnModel(mode=cfg.mode).windows)

    def work(row):
        images = preprocess_slice(to_hu(read_dicom(row.path)), pcfg, windows)
        return images, images[0].crop_box, images[0].used_fallback

    with ThreadPoolExecutor(cfg.jobs) as pool:
        results = list(pool.map(work, manifest))
    # boxes are in center-crop coordinates
    lines = ["slice\tpatient_id\tx0\ty0\tx1\ty1\tused_fallback"]
    for n, (row, (images, box, fallback)) in enumerate(zip(manifest, results)):
        stem = f"{n:05d}_{row.patient_id}_{Path(row.path).stem}"
        for img in images:
            _png(img.values, out / f"{stem}_{img.window_name}.png")
        lines.append(f"{stem}\t{row.patient_id}\t{box.x0}\t{box.y0}\t{box.x1}\t{box.y1}\t{str(fallback).lower()}")
    (out / "crop_boxes.tsv").write_text("\n".join(lines) + "\n")
    log.info("preprocessed %d slices into %s", len(results), out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    manifest = _manifest(args.manifest)
    model = CbamdrnModel(cfg.model_config(), cfg.mode, seed=cfg.seed)
    train_rows = manifest.subset(Split.TRAIN)
    val_rows = manifest.subset(Split.VAL)
    if not len(train_rows):
        raise DataError("manifest has no TRAIN rows")
    pcfg = cfg.preprocess_config()
    train_set = for_stage(dataset_from_manifest(train_rows, model.windows, pcfg, cfg.jobs), args.stage)
    val_set = None
    if len(val_rows):
        val_set = for_stage(dataset_from_manifest(val_rows, model.windows, pcfg, cfg.jobs), args.stage)
    if not len(train_set):
        raise DataError(f"no stage-{args.stage} training slices")
    result = train(model, train_set, cfg.train_config(), val_set)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    history = Path(args.history) if args.history else out.with_suffix(".history.json")
    _write_json(
        history,
        {
            "stage": args.stage,
            "classes": list(_stage_classes(args.stage)),
            "best_epoch": result.best_epoch,
            "epochs": [vars(e) for e in result.history],
            "config": cfg.to_dict(),
        },
    )
    log.info("saved stage-%d weights to %s (best epoch %d)", args.stage, out, result.best_epoch)
    return EXIT_OK


def stage_report(model: CbamdrnModel, manifest: DatasetManifest, stage: int, cfg: RunConfig) -> dict:
    ds = for_stage(dataset_from_manifest(manifest, model.windows, cfg.preprocess_config(), cfg.jobs), stage)
    if not len(ds):
        raise DataError(f"no stage-{stage} slices to evaluate")
    classes = _stage_classes(stage)
    pred = [classes[i] for i in predict_batch(infer_logits(model, ds))]
    truth = [classes[i] for i in ds.labels]
    precedence = (classes[1], classes[0])  # the positive class wins the OR
    per_slice = compute_metrics(pred, truth, "per_slice", classes=precedence)
    per_patient = compute_metrics(
        pred, truth, "per_patient", patient_ids=ds.patient_ids, classes=precedence, precedence=precedence
    )
    return {"stage": stage, "per_slice": per_slice.to_dict(), "per_patient": per_patient.to_dict()}


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    manifest = _manifest(args.manifest)
    if args.split != "ALL":
        manifest = manifest.subset(Split(args.split))
    if not len(manifest):
        raise DataError(f"manifest has no {args.split} rows")
    model = _load_model(args.weights, cfg)
    report = stage_report(model, manifest, args.stage, cfg)
    text = json.dumps(report, indent=2) + "\n"
    if args.out:
        _write_json(Path(args.out), report)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _collect_series(dicom_dir: Path):
    """Group readable files by patient; return (groups, errors)."""
    files = sorted(p for p in dicom_dir.rglob("*") if p.is_file() and p.suffix.lower() in (".dcm", ""))
    groups: dict[str, list[Path]] = defaultdict(list)
    errors: list[tuple[Path, str]] = []
    for path in files:
        try:
            ds = read_dicom(path)
        except (DicomError, OSError) as exc:
            errors.append((path, f"{type(exc).__name__}: {exc}"))
            continue
        groups[ds.patient_id].append(path)
    return dict(sorted(groups.items())), errors


def cmd_triage(args) -> int:
    cfg = _run_config(args)
    dicom_dir = Path(args.dicom_dir)
    if not dicom_dir.is_dir():
        raise DataError(f"{dicom_dir} is not a directory")
    stage1 = _load_model(args.stage1, cfg)
    stage2 = _load_model(args.stage2, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    groups, errors = _collect_series(dicom_dir)
    pcfg = cfg.preprocess_config()

    def run_patient(item):
        pid, paths = item
        volume = load_series(paths)
        preds, images = [], []
        for inst, hu in zip(volume.instance_numbers, volume.slices):
            windows = preprocess_slice(hu, pcfg, stage1.windows)
            preds.append(triage_slice(windows, stage1, stage2, slice_id=f"{pid}/{inst}"))
            images.append(windows)
        return triage_patient(preds, pid), images

    results = []
    with ThreadPoolExecutor(cfg.jobs) as pool:
        futures = [(item[0], pool.submit(run_patient, item)) for item in groups.items()]
        for pid, fut in futures:
            try:
                results.append(fut.result())
            except (DicomError, ValueError) as exc:
                errors.append((Path(pid), f"{type(exc).__name__}: {exc}"))

    verdicts = ["patient_id\tverdict\tslices\tpe_slices\tother_slices"]
    slices = ["slice_id\tstage1\tstage2\tlabel"]
    for res, images in results:
        labels = [p.label for p in res.predictions]
        verdicts.append(
            f"{res.patient_id}\t{res.final.value}\t{len(labels)}"
            f"\t{labels.count(SliceLabel.PE)}\t{labels.count(SliceLabel.OTHER)}"
        )
        for p, windows in zip(res.predictions, images):
            slices.append(f"{p.slice_id}\t{p.stage1}\t{p.stage2 or '-'}\t{p.label.value}")
            if args.explain and p.label is SliceLabel.PE:
                _explain_slice(stage2, windows, 1, args.layer, out / "overlays", p.slice_id.replace("/", "_"))
    (out / "verdicts.tsv").write_text("\n".join(verdicts) + "\n")
    (out / "slices.tsv").write_text("\n".join(slices) + "\n")
    if errors:
        (out / "errors.tsv").write_text("".join(f"{p}\t{msg}\n" for p, msg in errors))
        for p, msg in errors:
            sys.stderr.write(f"error: {p}: {msg}\n")
        return EXIT_DATA
    return EXIT_OK


def _explain_slice(model, windows, class_idx, layer, out: Path, stem: str) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for cam, img in zip(gradcam.grad_cam(model, windows, class_idx, layer), windows):
        written.append(gradcam.save_png(gradcam.overlay(cam, img), out / f"{stem}_{cam.window_name}.png"))
    return written


def cmd_explain(args) -> int:
    cfg = _run_config(args)
    model = _load_model(args.weights, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    classes = _stage_classes(args.stage)
    class_idx = classes.index(args.target) if args.target else 1
    pcfg = cfg.preprocess_config()
    for path in args.dicom:
        windows = preprocess_slice(to_hu(read_dicom(path)), pcfg, model.windows)
        maps = gradcam.grad_cam(model, windows, class_idx, args.layer)
        stem = Path(path).stem
        for cam, img in zip(maps, windows):
            gradcam.save_png(gradcam.overlay(cam, img), out / f"{stem}_{cam.window_name}.png")
            if args.dump_maps:
                gradcam.dump_map(cam, out / f"{stem}_{cam.window_name}.cam")
    log.info("wrote overlays for %d slices to %s", len(args.dicom), out)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _add_run_flags(p: argparse.ArgumentParser, training: bool = False) -> None:
    p.add_argument("--config", help="JSON config file (keys as in RunConfig)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key; repeatable")
    p.add_argument("--mode", help="window set: VWL, DWL, TWL or MWL")
    p.add_argument("--jobs", type=int, help="worker threads for loading and inference")
    if training:
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pe-triage", description="Two-stage lung CT slice triage.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="write a synthetic DICOM cohort and manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--pe", type=int, default=13, help="PE patients")
    p.add_argument("--other", type=int, default=26, help="other-disease patients")
    p.add_argument("--wnl", type=int, default=14, help="WNL patients")
    p.add_argument("--slices", type=int, default=10, help="slices per patient")
    p.add_argument("--size", type=int, default=512, help="slice side in pixels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="5,3,2", help="train,val,test ratios; empty for all TRAIN")
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("preprocess", help="dump windowed images and the crop-box report")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--windows", help="comma-separated windows (default: the mode's set)")
    _add_run_flags(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train one stage on the manifest's TRAIN rows")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="weights file (CTW1)")
    p.add_argument("--history", help="history JSON (default: next to the weights)")
    _add_run_flags(p, training=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-slice and per-patient metrics for one stage")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--split", default="TEST", choices=["TRAIN", "VAL", "TEST", "ALL"])
    p.add_argument("--out", help="metrics JSON (default: stdout)")
    _add_run_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("triage", help="per-patient verdicts for a directory of DICOM files")
    p.add_argument("--dicom-dir", required=True)
    p.add_argument("--stage1", required=True, help="stage-1 weights")
    p.add_argument("--stage2", required=True, help="stage-2 weights")
    p.add_argument("--out", required=True)
    p.add_argument("--explain", action="store_true", help="Grad-CAM overlays for every PE slice")
    p.add_argument("--layer", help="Grad-CAM layer (default: last stage)")
    _add_run_flags(p)
    p.set_defaults(func=cmd_triage)

    p = sub.add_parser("explain", help="Grad-CAM overlays for individual slices")
    p.add_argument("dicom", nargs="+", help="DICOM files")
    p.add_argument("--weights", required=True)
    p.add_argument("--stage", type=int, choices=(1, 2), default=2)
    p.add_argument("--target", help="class name (default: the stage's positive class)")
    p.add_argument("--layer", help="stem or stageN (default: last stage)")
    p.add_argument("--out", required=True)
    p.add_argument("--dump-maps", action="store_true", help="also write raw maps (.cam)")
    _add_run_flags(p)
    p.set_defaults(func=cmd_explain)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "target", None) and args.target not in _stage_classes(args.stage):
        sys.stderr.write(f"error: --target must be one of {_stage_classes(args.stage)}\n")
        return EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, UnknownLayer, WindowSetMismatch) as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_USAGE
    except (
        DataError,
        DicomError,
        ManifestError,
        EmptyDataset,
        nn.CorruptWeights,
        nn.IncompatibleWeights,
        OSError,
    ) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
