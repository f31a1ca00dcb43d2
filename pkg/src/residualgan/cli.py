"""Command line entry point: ``residualgan <command> --config PATH [--set key=value ...]``.

Failures exit nonzero and print one JSON object to stderr::

    {"status": "error", "category": "config_error", "message": "..."}
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import config as config_mod
from . import pipeline
from .checkpoint import CheckpointError
from .config import ConfigError
from .datakit import ValidationError
from .metrics import format_report
from .train_a import TrainingDiverged

EXIT_CODES = {
    "internal_error": 1,
    "config_error": 2,
    "data_error": 3,
    "checkpoint_error": 4,
    "training_diverged": 5,
}


def _category(exc: BaseException) -> str:
    if isinstance(exc, ConfigError):
        return "config_error"
    if isinstance(exc, CheckpointError):
        return "checkpoint_error"
    if isinstance(exc, TrainingDiverged):
        return "training_diverged"
    if isinstance(exc, (ValidationError, FileNotFoundError)):
        return "data_error"
    return "internal_error"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="residualgan", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, help="YAML configuration file")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value by dotted key (repeatable)")
        return sp

    add("tile", "cut rasters (and color labels) into a tile manifest")
    add("synth", "render the synthetic source/target pair")
    for name, help_ in (("train-a", "train the generators and critics"), ("train-b", "train the segmenter")):
        add(name, help_).add_argument("--fresh", action="store_true", help="ignore existing checkpoints")
    add("translate", "map source tiles into the target domain")
    ev = add("eval", "score the segmenter (or a prediction directory) on target tiles")
    ev.add_argument("--predictions", help="directory of color-coded predicted label maps")
    ev.add_argument("--format", choices=("paper_table", "json", "csv"), default="paper_table",
                    help="format echoed to stdout; all configured formats are written")
    run = add("run", "synth (if configured), train-a, translate, train-b, eval")
    run.add_argument("--fresh", action="store_true", help="ignore existing checkpoints")
    sw = add("sweep", "run a grid of configurations and rank them by mIoU")
    sw.add_argument("--max-parallel", type=int, default=None, help="concurrent runs (default 1)")
    return p


def _load_tile_job(path: str, overrides: list[str]) -> pipeline.TileJob:
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("tile config must be a mapping")
    return pipeline.TileJob.from_dict(config_mod.apply_overrides(data, overrides))


def _dispatch(args) -> dict:
    if args.command == "tile":
        m = pipeline.cmd_tile(_load_tile_job(args.config, args.overrides))
        return {"manifest": str(m.root / "manifest.jsonl"), "tiles": len(m)}
    cfg = config_mod.load(args.config, args.overrides)
    out = str(cfg.output_dir())
    if args.command == "synth":
        src, tgt = pipeline.cmd_synth(cfg)
        return {"source_manifest": str(src.root / "manifest.jsonl"), "source_tiles": len(src),
                "target_manifest": str(tgt.root / "manifest.jsonl"), "target_tiles": len(tgt)}
    if args.command == "train-a":
        ck = pipeline.cmd_train_a(cfg, fresh=args.fresh)
        return {"output_dir": out, "epoch": ck.epoch, "disc_steps": ck.disc_steps, "gen_steps": ck.gen_steps}
    if args.command == "translate":
        m = pipeline.cmd_translate(cfg)
        return {"manifest": str(m.root / "manifest.jsonl"), "tiles": len(m)}
    if args.command == "train-b":
        ck = pipeline.cmd_train_b(cfg, fresh=args.fresh)
        return {"output_dir": out, "epoch": ck.epoch, "best_epoch": ck.best_epoch}
    if args.command == "eval":
        report = pipeline.cmd_eval(cfg, predictions=args.predictions)
        sys.stdout.write(format_report(report, args.format))
        return {"output_dir": out, "miou": report.miou, "overall_f1": report.overall_f1}
    if args.command == "run":
        report = pipeline.run_all(cfg, fresh=args.fresh)
        return {"output_dir": out, "miou": report.miou, "overall_f1": report.overall_f1}
    if args.command == "sweep":
        rows = pipeline.cmd_sweep(cfg, max_parallel=args.max_parallel)
        return {"output_dir": out, "runs": len(rows), "best": rows[0] if rows else None}
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = _dispatch(args)
    except Exception as exc:
        cat = _category(exc)
        if cat == "internal_error":
            logging.getLogger(__name__).exception("unexpected failure")
        json.dump({"status": "error", "category": cat, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return EXIT_CODES[cat]
    json.dump({"status": "ok", "command": args.command, **result}, sys.stderr, default=str)
    sys.stderr.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
