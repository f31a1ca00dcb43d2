"""Confusion matrices, per-class IoU / F1 and report rendering."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

# Table column order: clutter, impervious, car, tree, low vegetation, building.
TABLE_CLASS_TITLES = (
    "Background/Clutter",
    "Impervious Surface",
    "Car",
    "Tree",
    "Low Vegetation",
    "Building",
)


@dataclass
class ConfusionMatrix:
    """Counts with rows = ground truth, columns = prediction."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError("confusion counts must be square")
        if (self.counts < 0).any():
            raise ValueError("confusion counts must be non-negative")

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("class count mismatch")
        return ConfusionMatrix(self.counts + other.counts)

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))


def confusion(labels: np.ndarray, preds: np.ndarray, num_classes: int) -> ConfusionMatrix:
    labels = np.asarray(labels).ravel().astype(np.int64)
    preds = np.asarray(preds).ravel().astype(np.int64)
    if labels.shape != preds.shape:
        raise ValueError("labels and predictions differ in size")
    for name, a in (("labels", labels), ("preds", preds)):
        if a.size and (a.min() < 0 or a.max() >= num_classes):
            raise ValueError(f"{name} contain values outside 0..{num_classes - 1}")
    counts = np.bincount(labels * num_classes + preds, minlength=num_classes**2)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes))


def merge(*cms: ConfusionMatrix) -> ConfusionMatrix:
    out = cms[0]
    for cm in cms[1:]:
        out = out + cm
    return out


def _tp_fp_fn(cm: ConfusionMatrix):
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    return tp, c.sum(axis=0) - tp, c.sum(axis=1) - tp


def present_classes(cm: ConfusionMatrix) -> np.ndarray:
    """Classes occurring in the ground truth or in the predictions."""
    c = cm.counts
    return (c.sum(axis=0) + c.sum(axis=1)) > 0


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """``TP / (TP + FP + FN)``; classes absent from truth and prediction get 1.0."""
    tp, fp, fn = _tp_fp_fn(cm)
    denom = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / np.where(denom > 0, denom, 1), 1.0)


def f1_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """``2PR / (P + R)``, 0 when ``P + R = 0``; absent classes get 1.0."""
    tp, fp, fn = _tp_fp_fn(cm)
    denom = 2 * tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1), 1.0)


@dataclass
class MetricsReport:
    class_names: list[str]
    iou: list[float]
    f1: list[float]
    miou: float
    overall_f1: float
    method: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            class_names=list(d["class_names"]),
            iou=[float(v) for v in d["iou"]],
            f1=[float(v) for v in d["f1"]],
            miou=float(d["miou"]),
            overall_f1=float(d["overall_f1"]),
            method=d.get("method", ""),
        )


def compute_report(
    cm: ConfusionMatrix, class_names: list[str] | None = None, strict: bool = False, method: str = ""
) -> MetricsReport:
    """Aggregate a confusion matrix.

    mIoU and overall F1 are unweighted means over classes. By default
    classes absent from both truth and prediction are left out of the
    means; ``strict=True`` averages over all classes with absent ones at 0.
    """
    iou = iou_per_class(cm)
    f1 = f1_per_class(cm)
    present = present_classes(cm)
    if strict:
        miou = float(np.where(present, iou, 0.0).mean())
        mf1 = float(np.where(present, f1, 0.0).mean())
    elif present.any():
        miou, mf1 = float(iou[present].mean()), float(f1[present].mean())
    else:
        miou = mf1 = 0.0
    names = class_names or [f"class_{i}" for i in range(cm.num_classes)]
    return MetricsReport(list(names), iou.tolist(), f1.tolist(), miou, mf1, method)


def format_report(report: MetricsReport, style: str = "paper_table") -> str:
    if style == "json":
        return json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if style == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "class_name", "iou", "f1"])
        for name, i, f in zip(report.class_names, report.iou, report.f1):
            w.writerow([report.method, name, repr(float(i)), repr(float(f))])
        w.writerow([report.method, "__overall__", repr(float(report.miou)), repr(float(report.overall_f1))])
        return buf.getvalue()
    if style == "paper_table":
        titles = TABLE_CLASS_TITLES if len(report.class_names) == 6 else report.class_names
        header = " & ".join(["Methods"] + [f"{t} IoU & {t} F1" for t in titles] + ["mIoU & F1"])
        cells = []
        for i, f in zip(report.iou, report.f1):
            cells += [f"{100 * i:.2f}", f"{100 * f:.2f}"]
        cells += [f"{100 * report.miou:.2f}", f"{100 * report.overall_f1:.2f}"]
        row = " & ".join([report.method or "-"] + cells)
        return header + " \\\\\n" + row + " \\\\\n"
    raise ValueError(f"unknown style {style!r}")


def parse_report(text: str, style: str) -> MetricsReport:
    """Inverse of :func:`format_report` for the ``json`` and ``csv`` styles."""
    if style == "json":
        return MetricsReport.from_dict(json.loads(text))
    if style == "csv":
        rows = list(csv.DictReader(io.StringIO(text)))
        overall = [r for r in rows if r["class_name"] == "__overall__"]
        per = [r for r in rows if r["class_name"] != "__overall__"]
        if len(overall) != 1:
            raise ValueError("csv report needs exactly one __overall__ row")
        return MetricsReport(
            [r["class_name"] for r in per],
            [float(r["iou"]) for r in per],
            [float(r["f1"]) for r in per],
            float(overall[0]["iou"]),
            float(overall[0]["f1"]),
            overall[0]["method"],
        )
    raise ValueError(f"cannot parse style {style!r}")


# Reference ResiDualGAN+OSA row for PotsdamIRRG -> Vaihingen.
REFERENCE_ROW = MetricsReport(
    class_names=["clutter", "impervious_surface", "car", "tree", "low_vegetation", "building"],
    iou=[0.1164, 0.7229, 0.5701, 0.6381, 0.4969, 0.8057],
    f1=[0.1842, 0.8389, 0.7251, 0.7788, 0.6629, 0.8923],
    miou=0.5583,
    overall_f1=0.6804,
    method="ResiDualGAN+OSA",
)
