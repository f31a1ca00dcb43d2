"""Pipeline commands composed from the library modules.

Every run directory is self-describing::

    <out>/config.yaml          resolved configuration
    <out>/run.json             RunRecord (revision, seeds, checkpoints, metrics)
    <out>/data/                synthetic tiles, when the config has a synth section
    <out>/stage_a/ ...         generator/critic checkpoints
    <out>/translated/          source tiles mapped into the target domain
    <out>/stage_b/ ...         segmenter checkpoints
    <out>/eval/                report.{txt,json,csv} and predicted label maps

Each stage resumes from its newest checkpoint unless ``fresh`` is set.
"""

from __future__ import annotations

import concurrent.futures
import copy
import csv
import dataclasses
import datetime as _dt
import itertools
import json
import logging
import os
import shutil
import subprocess
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import config as config_mod
from .checkpoint import CheckpointError
from .config import ConfigError, ExperimentConfig
from .datakit import (
    ClassPalette,
    DomainSpec,
    ISPRS_PALETTE,
    TileManifest,
    TileRecord,
    ValidationError,
    decode_labels,
    encode_labels,
    generate_synthetic_pair,
    load_image,
    save_image,
    tile_raster,
)
from .metrics import ConfusionMatrix, MetricsReport, compute_report, confusion, format_report
from .train_a import StageACheckpoint, TrainingDiverged, train_stage_a, translate_dataset
from .train_b import StageBCheckpoint, evaluate, predict, train_stage_b

log = logging.getLogger(__name__)

STAGES = ("synth", "train-a", "translate", "train-b", "eval")
IMAGE_SUFFIXES = (".png", ".tif", ".tiff", ".jpg", ".jpeg")


# -- run record ---------------------------------------------------------------


def source_revision() -> str:
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], cwd=here, capture_output=True, text=True, timeout=5
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"git:{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"residualgan-{__version__}"


@dataclass
class RunRecord:
    config: dict
    revision: str
    seeds: dict[str, int] = field(default_factory=dict)
    checkpoints: dict[str, str] = field(default_factory=dict)
    metrics: dict | None = None
    commands: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)

    def dump(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class Run:
    """Bookkeeping for one output directory."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = cfg.output_dir()
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.yaml").write_text(config_mod.render(cfg))
        path = self.out / "run.json"
        rec = RunRecord.load(path) if path.exists() else None
        snapshot = cfg.to_dict()
        if rec is None:
            rec = RunRecord(snapshot, source_revision())
        rec.config, rec.revision = snapshot, source_revision()
        rec.seeds = {"stage_a": cfg.stage_a.seed, "stage_b": cfg.stage_b.seed}
        if cfg.synth is not None:
            rec.seeds["synth"] = cfg.synth.seed
        self.record = rec

    def save(self) -> None:
        self.record.dump(self.out / "run.json")

    def command(self, name: str):
        return _CommandScope(self, name)


class _CommandScope:
    def __init__(self, run: Run, name: str):
        self.run, self.entry = run, {"command": name, "started": _now()}

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.entry["finished"] = _now()
        self.entry["status"] = "ok" if exc_type is None else f"error: {exc_type.__name__}"
        self.run.record.commands.append(self.entry)
        self.run.save()
        return False


# -- data resolution -----------------------------------------------------------


def _load_manifest(path) -> TileManifest:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"manifest not found: {p}")
    return TileManifest.load(p)


def source_manifest(cfg: ExperimentConfig) -> TileManifest:
    if cfg.paths.source_manifest:
        return _load_manifest(cfg.paths.source_manifest)
    if cfg.synth is not None:
        return _load_manifest(cfg.output_dir() / "data" / cfg.synth.source.name / "manifest.jsonl")
    raise ConfigError("paths.source_manifest is not set and there is no synth section")


def target_manifest(cfg: ExperimentConfig) -> TileManifest:
    if cfg.paths.target_manifest:
        return _load_manifest(cfg.paths.target_manifest)
    if cfg.synth is not None:
        return _load_manifest(cfg.output_dir() / "data" / cfg.synth.target.name / "manifest.jsonl")
    raise ConfigError("paths.target_manifest is not set and there is no synth section")


def _nonempty_split(m: TileManifest, *names: str) -> TileManifest:
    sub = m.split(*names)
    return sub if len(sub) else m


def target_train(cfg: ExperimentConfig) -> TileManifest:
    """Unlabeled target tiles seen during adaptation (the train split, else all)."""
    return _nonempty_split(target_manifest(cfg), "train").unlabeled()


def target_val(cfg: ExperimentConfig) -> TileManifest | None:
    if cfg.paths.val_manifest:
        return _load_manifest(cfg.paths.val_manifest)
    m = target_manifest(cfg)
    val = m.split("val")
    return val if len(val) and val.annotated else None


def target_eval(cfg: ExperimentConfig) -> TileManifest:
    if cfg.paths.test_manifest:
        m = _load_manifest(cfg.paths.test_manifest)
    else:
        full = target_manifest(cfg)
        m = full.split(cfg.metrics.eval_split)
        if not len(m):
            log.warning("target has no %r split; evaluating on all target tiles", cfg.metrics.eval_split)
            m = full
    if not m.annotated:
        raise ValidationError("evaluation tiles have no labels")
    return m


# -- stages --------------------------------------------------------------------


def cmd_synth(cfg: ExperimentConfig) -> tuple[TileManifest, TileManifest]:
    if cfg.synth is None:
        raise ConfigError("config has no synth section")
    run = Run(cfg)
    with run.command("synth"):
        out = run.out / "data"
        src_path = out / cfg.synth.source.name / "manifest.jsonl"
        tgt_path = out / cfg.synth.target.name / "manifest.jsonl"
        stamp = out / "synth.yaml"
        wanted = yaml.safe_dump(_jsonable(cfg.synth.to_dict()), sort_keys=True)
        if src_path.exists() and tgt_path.exists() and stamp.exists() and stamp.read_text() == wanted:
            log.info("synthetic data already present in %s", out)
            return TileManifest.load(src_path), TileManifest.load(tgt_path)
        pair = generate_synthetic_pair(cfg.synth, out)
        stamp.write_text(wanted)
        return pair


def cmd_train_a(cfg: ExperimentConfig, fresh: bool = False) -> StageACheckpoint:
    run = Run(cfg)
    with run.command("train-a"):
        if fresh:
            shutil.rmtree(run.out / "stage_a", ignore_errors=True)
            (run.out / "stage_a_losses.jsonl").unlink(missing_ok=True)
        src = source_manifest(cfg)
        tgt = target_train(cfg)
        ck = train_stage_a(cfg.stage_a_config(), src, tgt, out_dir=run.out, resume=not fresh)
        run.record.checkpoints["stage_a"] = str(run.out / "stage_a" / "final.ckpt")
        return ck


def cmd_translate(cfg: ExperimentConfig) -> TileManifest:
    run = Run(cfg)
    with run.command("translate"):
        ck_path = run.out / "stage_a" / "final.ckpt"
        if not ck_path.exists():
            raise CheckpointError(f"{ck_path}: stage A has not finished; run train-a first")
        ck = StageACheckpoint.load(ck_path)
        src = source_manifest(cfg)
        if not src.annotated:
            raise ValidationError("source manifest has no labels to carry over")
        out = run.out / "translated"
        shutil.rmtree(out, ignore_errors=True)
        return translate_dataset(ck, src, "s2t", out)


def cmd_train_b(cfg: ExperimentConfig, fresh: bool = False) -> StageBCheckpoint:
    run = Run(cfg)
    with run.command("train-b"):
        if fresh:
            shutil.rmtree(run.out / "stage_b", ignore_errors=True)
            (run.out / "stage_b_losses.jsonl").unlink(missing_ok=True)
        translated = _load_manifest(run.out / "translated" / "manifest.jsonl")
        ck = train_stage_b(cfg.stage_b, translated, target_train(cfg), target_val(cfg),
                           out_dir=run.out, resume=not fresh)
        run.record.checkpoints["stage_b"] = str(run.out / "stage_b" / "final.ckpt")
        return ck


def evaluate_predictions(tiles: TileManifest, pred_dir, strict: bool = False,
                         method: str = "") -> tuple[MetricsReport, ConfusionMatrix]:
    """Score color-coded prediction PNGs (named after the tile images) against labels."""
    pred_dir = Path(pred_dir)
    palette = tiles.domain.palette
    pal_file = pred_dir / "palette.txt"
    if pal_file.exists():
        found = ClassPalette.load(pal_file)
        if found.to_pairs() != palette.to_pairs():
            raise ValidationError(f"{pal_file}: palette differs from the label palette")
    cm = ConfusionMatrix.zeros(palette.num_classes)
    for rec in tiles:
        stem = Path(rec.image_path).stem
        hits = [pred_dir / f"{stem}{s}" for s in IMAGE_SUFFIXES if (pred_dir / f"{stem}{s}").exists()]
        if not hits:
            raise ValidationError(f"no prediction for tile {stem} in {pred_dir}")
        pred = encode_labels(load_image(hits[0]), palette)
        truth = tiles.load_labels(rec)
        if pred.shape != truth.shape:
            raise ValidationError(f"{hits[0]}: shape {pred.shape} does not match labels {truth.shape}")
        cm = cm + confusion(truth, pred, palette.num_classes)
    return compute_report(cm, palette.names, strict=strict, method=method), cm


def write_report(report: MetricsReport, out_dir, formats=("paper_table", "json", "csv")) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ext = {"paper_table": "txt", "json": "json", "csv": "csv"}
    paths = {}
    for fmt in formats:
        p = out_dir / f"report.{ext[fmt]}"
        p.write_text(format_report(report, fmt))
        paths[fmt] = p
    return paths


def cmd_eval(cfg: ExperimentConfig, predictions=None) -> MetricsReport:
    """Evaluate the trained segmenter, or an existing directory of predicted label maps."""
    run = Run(cfg)
    with run.command("eval"):
        tiles = target_eval(cfg)
        out = run.out / "eval"
        if predictions is not None:
            report, cm = evaluate_predictions(tiles, predictions, cfg.metrics.strict, method="predictions")
        else:
            ck_path = run.out / "stage_b" / "final.ckpt"
            if not ck_path.exists():
                raise CheckpointError(f"{ck_path}: stage B has not finished; run train-b first")
            ck = StageBCheckpoint.load(ck_path)
            seg = ck.best_segmenter()
            report, cm = evaluate(seg, tiles, tiles.domain.palette.names, strict=cfg.metrics.strict)
            report = dataclasses.replace(report, method=_method_name(cfg))
            predict(seg, tiles, batch_size=8, out_dir=out / "predictions")
        write_report(report, out, cfg.metrics.formats)
        np.savetxt(out / "confusion.csv", cm.counts, fmt="%d", delimiter=",")
        run.record.metrics = report.to_dict()
        return report


def _method_name(cfg: ExperimentConfig) -> str:
    ab = cfg.ablation
    osa = "+OSA" if cfg.stage_b.weights.lambda_adv_o > 0 else ""
    return f"ResiDualGAN{osa} [{ab.backbone}, {ab.resize_placement}, residual {ab.residual}, k {ab.k_mode}]"


def run_all(cfg: ExperimentConfig, fresh: bool = False, stages=STAGES) -> MetricsReport | None:
    report = None
    if "synth" in stages and cfg.synth is not None and not cfg.paths.source_manifest:
        cmd_synth(cfg)
    if "train-a" in stages:
        cmd_train_a(cfg, fresh=fresh)
    if "translate" in stages:
        cmd_translate(cfg)
    if "train-b" in stages:
        cmd_train_b(cfg, fresh=fresh)
    if "eval" in stages:
        report = cmd_eval(cfg)
    return report


# -- tiling --------------------------------------------------------------------


@dataclass(frozen=True)
class TileJob:
    """Cut a directory of large rasters (and color label rasters) into a manifest."""

    domain: DomainSpec
    raster_dir: str
    out_dir: str
    label_dir: str | None = None
    annotated: bool = True
    stride_px: int | None = None
    label_suffix: str = ""
    label_fallback: int | None = None
    splits: dict = field(default_factory=dict)  # split name -> raster ids; rest are train

    @classmethod
    def from_dict(cls, d: dict) -> "TileJob":
        d = dict(d or {})
        allowed = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown key(s) in tile config: {sorted(unknown)}")
        for req in ("domain", "raster_dir", "out_dir"):
            if req not in d:
                raise ConfigError(f"tile config needs {req!r}")
        try:
            dom = dict(d.pop("domain"))
            if "palette" in dom and isinstance(dom["palette"], str):
                dom["palette"] = ClassPalette.load(dom["palette"]).to_pairs()
            return cls(domain=DomainSpec.from_dict(dom), **d)
        except (TypeError, ValidationError) as exc:
            raise ConfigError(str(exc)) from exc


def _rasters(d: Path) -> list[Path]:
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def cmd_tile(job: TileJob) -> TileManifest:
    raster_dir = Path(job.raster_dir)
    if not raster_dir.is_dir():
        raise ValidationError(f"raster directory not found: {raster_dir}")
    label_dir = Path(job.label_dir) if job.label_dir else None
    if job.annotated and (label_dir is None or not label_dir.is_dir()):
        raise ValidationError(f"annotated domain needs a label directory, got {job.label_dir!r}")
    split_of = {rid: name for name, ids in (job.splits or {}).items() for rid in ids}
    stride = job.stride_px or job.domain.tile_px
    out = Path(job.out_dir)
    rasters = _rasters(raster_dir)
    if not rasters:
        raise ValidationError(f"no raster images in {raster_dir}")
    records = []
    for path in rasters:
        rid = path.stem
        img = load_image(path)
        lab = None
        if job.annotated:
            cands = [label_dir / f"{rid}{job.label_suffix}{s}" for s in IMAGE_SUFFIXES]
            hits = [c for c in cands if c.exists()]
            if not hits:
                raise ValidationError(f"no label raster for {rid} in {label_dir}")
            lab = encode_labels(load_image(hits[0]), job.domain.palette, job.label_fallback)
            if lab.shape != img.shape[:2]:
                raise ValidationError(f"{hits[0]}: label size {lab.shape} differs from image {img.shape[:2]}")
        img_tiles = tile_raster(img, job.domain.tile_px, stride)
        lab_tiles = tile_raster(lab, job.domain.tile_px, stride) if lab is not None else [None] * len(img_tiles)
        for t, lt in zip(img_tiles, lab_tiles):
            name = f"{rid}_r{t.row:05d}_c{t.col:05d}.png"
            save_image(out / "images" / name, t.data)
            lab_rel = None
            if lt is not None:
                save_image(out / "labels" / name, decode_labels(lt.data, job.domain.palette))
                lab_rel = f"labels/{name}"
            records.append(TileRecord(f"images/{name}", lab_rel, rid, t.row, t.col, split_of.get(rid, "train")))
    m = TileManifest(job.domain, records, out.resolve())
    m.validate()
    m.dump(out / "manifest.jsonl")
    job.domain.palette.dump(out / "palette.txt")
    return m


# -- sweeps --------------------------------------------------------------------


def expand_grid(grid: dict) -> list[dict[str, object]]:
    """Cartesian product over axes. A key ``"a,b"`` is a paired axis whose values are tuples."""
    if not grid:
        return [{}]
    axes = []
    for key, values in grid.items():
        keys = [k.strip() for k in key.split(",")]
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep axis {key!r} needs a non-empty list of values")
        opts = []
        for v in values:
            if len(keys) > 1:
                if not isinstance(v, (list, tuple)) or len(v) != len(keys):
                    raise ConfigError(f"sweep axis {key!r}: value {v!r} must have {len(keys)} entries")
                opts.append(dict(zip(keys, v)))
            else:
                opts.append({keys[0]: v})
        axes.append(opts)
    points = []
    for combo in itertools.product(*axes):
        merged: dict[str, object] = {}
        for part in combo:
            merged.update(part)
        points.append(merged)
    return points


def dedupe_points(points: list[dict]) -> list[dict]:
    seen, out = set(), []
    for p in points:
        key = json.dumps(p, sort_keys=True)
        if key in seen:
            warnings.warn(f"duplicate sweep point {p} skipped", stacklevel=2)
            continue
        seen.add(key)
        out.append(p)
    return out


def _point_config(base: dict, point: dict, out_dir: Path, shared: dict) -> ExperimentConfig:
    d = copy.deepcopy(base)
    d.pop("sweep", None)
    for k, v in point.items():
        config_mod.set_dotted(d, k, v)
    d.setdefault("paths", {})
    d["paths"].update(shared)
    d["paths"]["output_dir"] = str(out_dir)
    if shared:
        d.pop("synth", None)
    return ExperimentConfig.from_dict(d)


def _run_point(cfg_dict: dict) -> dict:
    cfg = ExperimentConfig.from_dict(cfg_dict)
    report = run_all(cfg)
    return report.to_dict()


def cmd_sweep(cfg: ExperimentConfig, max_parallel: int | None = None) -> list[dict]:
    """Run every grid point and write ``sweep.csv``/``sweep.json`` sorted by mIoU (best first)."""
    spec = dict(cfg.sweep or {})
    unknown = set(spec) - {"grid", "max_parallel"}
    if unknown:
        raise ConfigError(f"unknown key(s) in sweep: {sorted(unknown)}")
    points = dedupe_points(expand_grid(spec.get("grid") or {}))
    workers = int(max_parallel or spec.get("max_parallel") or 1)
    root = cfg.output_dir()
    root.mkdir(parents=True, exist_ok=True)
    base = cfg.to_dict()

    shared: dict[str, str] = {}
    if cfg.synth is not None and not cfg.paths.source_manifest:
        data_cfg = ExperimentConfig.from_dict({**{k: v for k, v in base.items() if k != "sweep"},
                                               "paths": {**base["paths"], "output_dir": str(root)}})
        cmd_synth(data_cfg)
        shared = {
            "source_manifest": str(root / "data" / cfg.synth.source.name / "manifest.jsonl"),
            "target_manifest": str(root / "data" / cfg.synth.target.name / "manifest.jsonl"),
        }

    configs = []
    for i, p in enumerate(points):
        pc = _point_config(base, p, root / f"point_{i:03d}", shared)
        configs.append(pc)
    snapshots = [json.dumps(c.to_dict(), sort_keys=True) for c in configs]
    if len(set(snapshots)) != len(snapshots):
        raise ConfigError("sweep points resolve to identical configurations")

    dicts = [c.to_dict() for c in configs]
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_run_point, dicts))
    else:
        reports = [_run_point(d) for d in dicts]

    rows = []
    for i, (p, rep) in enumerate(zip(points, reports)):
        rows.append({"point": i, "overrides": p, "miou": rep["miou"], "overall_f1": rep["overall_f1"],
                     "iou": dict(zip(rep["class_names"], rep["iou"])),
                     "output_dir": str(configs[i].output_dir())})
    rows.sort(key=lambda r: (-r["miou"], r["point"]))
    (root / "sweep.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    axis_keys = sorted({k for p in points for k in p})
    names = list(rows[0]["iou"]) if rows else []
    with open(root / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "point", *axis_keys, "miou", "overall_f1", *[f"iou_{n}" for n in names], "output_dir"])
        for rank, r in enumerate(rows, 1):
            w.writerow([rank, r["point"], *[r["overrides"].get(k, "") for k in axis_keys],
                        f"{r['miou']:.6f}", f"{r['overall_f1']:.6f}",
                        *[f"{r['iou'][n]:.6f}" for n in names], r["output_dir"]])
    return rows


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


__all__ = [
    "RunRecord", "TileJob", "cmd_tile", "cmd_synth", "cmd_train_a", "cmd_translate", "cmd_train_b",
    "cmd_eval", "cmd_sweep", "run_all", "expand_grid", "dedupe_points", "evaluate_predictions",
    "write_report", "TrainingDiverged", "ISPRS_PALETTE",
]
