"""Whole pipeline at toy scale: synth, translate, segment, score.

Takes about ten seconds on one CPU core.
"""

import sys
import tempfile
from pathlib import Path

import yaml

from residualgan import pipeline
from residualgan.config import ExperimentConfig
from residualgan.metrics import format_report
from residualgan.train_a import StageACheckpoint

root = Path(__file__).resolve().parents[1]
data = yaml.safe_load((root / "configs" / "synthetic_tiny.yaml").read_text())

with tempfile.TemporaryDirectory() as tmp:
    data["paths"]["output_dir"] = tmp
    cfg = ExperimentConfig.from_dict(data)
    report = pipeline.run_all(cfg)
    sys.stdout.write(format_report(report, "paper_table"))

    ck = StageACheckpoint.load(Path(tmp) / "stage_a" / "final.ckpt")
    last = ck.history[-1]
    print(f"stage A: {ck.disc_steps} critic steps, {ck.gen_steps} generator steps, cycle loss {last['cyc']:.4f}")
