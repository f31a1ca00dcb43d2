"""Line-delimited loss log shared by both training stages."""

from __future__ import annotations

import json
import os
from pathlib import Path


class MetricsLog:
    """Appends ``{"stage", "step", "name", "value"}`` records, one per line.

    With ``path=None`` records are only kept in memory.
    """

    def __init__(self, path: str | os.PathLike | None = None, stage: str = ""):
        self.path = Path(path) if path is not None else None
        self.stage = stage
        self.records: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def log(self, step: int, values: dict[str, float]) -> None:
        recs = [{"stage": self.stage, "step": int(step), "name": k, "value": float(v)} for k, v in values.items()]
        self.records.extend(recs)
        if self.path is not None:
            with open(self.path, "a") as fh:
                for r in recs:
                    fh.write(json.dumps(r) + "\n")

    def values(self, name: str) -> list[float]:
        return [r["value"] for r in self.records if r["name"] == name]

    @staticmethod
    def read(path: str | os.PathLike) -> list[dict]:
        return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
