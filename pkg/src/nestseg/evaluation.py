"""Overlap metrics, bootstrap intervals and report files."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import NUM_CLASSES, BinaryMask, LabelMap

REGION_IDS = tuple(range(1, NUM_CLASSES))
COLUMNS = ("brain", "ticv", "pfv")
_TITLES = {"brain": "Brain", "ticv": "TICV", "pfv": "PFV"}


class GridMismatch(ValueError):
    pass


def _as_array(x) -> tuple[np.ndarray, np.ndarray | None]:
    if isinstance(x, (BinaryMask, LabelMap)):
        return x.data, x.affine
    return np.asarray(x), None


def _check_same_grid(a, b, a_aff, b_aff):
    if a.shape != b.shape:
        raise GridMismatch(f"grid mismatch: shapes {a.shape} vs {b.shape}")
    if a_aff is not None and b_aff is not None and not np.allclose(a_aff, b_aff, atol=1e-5):
        raise GridMismatch("grid mismatch: affines differ")


def dsc(pred, gt) -> float:
    """2|A and B| / (|A| + |B|); two empty masks score 1.0."""
    a, a_aff = _as_array(pred)
    b, b_aff = _as_array(gt)
    _check_same_grid(a, b, a_aff, b_aff)
    a = a.astype(bool)
    b = b.astype(bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


@dataclass
class RegionScores:
    per_class: list[float]  # ids 1..132 in order
    absent: list[int]  # ids missing from both maps (scored 1.0)
    mean: float  # over all 132 ids
    mean_present: float  # over ids present in either map

    def score(self, label_id: int) -> float:
        return self.per_class[label_id - 1]


def region_dsc(pred: LabelMap | np.ndarray, gt: LabelMap | np.ndarray, num_classes: int = NUM_CLASSES) -> RegionScores:
    if isinstance(pred, LabelMap) and isinstance(gt, LabelMap) and pred.protocol != gt.protocol:
        raise ValueError(
            f"label protocol mismatch: {pred.protocol.name} {pred.protocol.version} vs {gt.protocol.name} {gt.protocol.version}"
        )
    p, p_aff = _as_array(pred)
    g, g_aff = _as_array(gt)
    _check_same_grid(p, g, p_aff, g_aff)
    p = p.ravel().astype(np.int64)
    g = g.ravel().astype(np.int64)
    if p.size and (max(p.max(), g.max()) >= num_classes or min(p.min(), g.min()) < 0):
        raise ValueError(f"label ids outside 0..{num_classes - 1}")
    inter = np.bincount(g[p == g], minlength=num_classes)[1:]
    denom = (np.bincount(p, minlength=num_classes) + np.bincount(g, minlength=num_classes))[1:]
    absent = denom == 0
    scores = np.where(absent, 1.0, 2.0 * inter / np.maximum(denom, 1))
    present = scores[~absent]
    return RegionScores(
        per_class=[float(s) for s in scores],
        absent=[int(i) + 1 for i in np.flatnonzero(absent)],
        mean=float(scores.mean()),
        mean_present=float(present.mean()) if present.size else 1.0,
    )


def bootstrap_ci(scores, level: float = 0.95, resamples: int = 10_000, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean, resampling subjects."""
    x = np.asarray(scores, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise ValueError(f"bootstrap needs at least 2 subject scores, got {x.size}")
    if not 0.0 < level < 1.0:
        raise ValueError(f"confidence level must lie in (0, 1), got {level}")
    if np.ptp(x) == 0:
        c = float(x[0])
        return c, c
    rng = np.random.default_rng(seed)
    means = x[rng.integers(0, x.size, size=(resamples, x.size))].mean(axis=1)
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [tail, 1.0 - tail])
    return float(lo), float(hi)


@dataclass
class SubjectScores:
    subject: str
    brain: float
    brain_present: float
    per_class: list[float]
    absent: list[int]
    ticv: float | None = None
    pfv: float | None = None
    volumes_mm3: dict[str, float] = field(default_factory=dict)  # e.g. ticv_pred, ticv_gt

    def column(self, name: str, brain_metric: str = "mean") -> float | None:
        if name == "brain":
            return self.brain_present if brain_metric == "mean_present" else self.brain
        return getattr(self, name)


def score_subject(
    subject: str,
    pred_labels: LabelMap,
    gt_labels: LabelMap,
    pred_ticv: BinaryMask | None = None,
    gt_ticv: BinaryMask | None = None,
    pred_pfv: BinaryMask | None = None,
    gt_pfv: BinaryMask | None = None,
) -> SubjectScores:
    regions = region_dsc(pred_labels, gt_labels)
    out = SubjectScores(subject, regions.mean, regions.mean_present, regions.per_class, regions.absent)
    for name, pred, gt in (("ticv", pred_ticv, gt_ticv), ("pfv", pred_pfv, gt_pfv)):
        if pred is None or gt is None:
            continue
        setattr(out, name, dsc(pred, gt))
        out.volumes_mm3[f"{name}_pred"] = pred.volume_mm3()
        out.volumes_mm3[f"{name}_gt"] = gt.volume_mm3()
    return out


@dataclass
class ColumnSummary:
    dsc: float
    lci: float
    uci: float


@dataclass
class DscReport:
    subjects: list[SubjectScores]
    columns: dict[str, ColumnSummary]
    per_class_mean: list[float]
    brain_metric: str = "mean"
    level: float = 0.95
    resamples: int = 10_000
    seed: int = 0

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "DscReport":
        d = dict(d)
        d["subjects"] = [SubjectScores(**s) for s in d["subjects"]]
        d["columns"] = {k: ColumnSummary(**v) for k, v in d["columns"].items()}
        return cls(**d)

    def values(self) -> list[float]:
        return [v for c in self.columns.values() for v in (c.dsc, c.lci, c.uci)]


def build_report(
    subjects: list[SubjectScores],
    level: float = 0.95,
    resamples: int = 10_000,
    seed: int = 0,
    brain_metric: str = "mean",
) -> DscReport:
    """Aggregate subjects; ``brain_metric`` is ``mean`` (all 132 ids) or ``mean_present``."""
    if not subjects:
        raise ValueError("report needs at least one subject")
    if brain_metric not in ("mean", "mean_present"):
        raise ValueError(f"unknown brain metric {brain_metric!r}")
    columns = {}
    for name in COLUMNS:
        vals = [s.column(name, brain_metric) for s in subjects]
        if any(v is None for v in vals):
            continue
        point = float(np.mean(vals))
        lo, hi = bootstrap_ci(vals, level, resamples, seed) if len(vals) >= 2 else (point, point)
        columns[name] = ColumnSummary(point, lo, hi)
    per_class = np.mean([s.per_class for s in subjects], axis=0)
    return DscReport(subjects, columns, [float(v) for v in per_class], brain_metric, level, resamples, seed)


def markdown_table(report: DscReport, method: str = "nestseg") -> str:
    names = [c for c in COLUMNS if c in report.columns]
    head = ["Method"] + [f"{_TITLES[c]} {k}" for c in names for k in ("DSC", "LCI", "UCI")]
    row = [method] + [f"{v:.4f}" for c in names for v in (report.columns[c].dsc, report.columns[c].lci, report.columns[c].uci)]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head), "| " + " | ".join(row) + " |"]
    return "\n".join(lines) + "\n"


def emit_report(report: DscReport, out_dir: str | Path, formats=("json", "csv", "markdown"), stem: str = "report") -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    for fmt in formats:
        if fmt == "json":
            path = out / f"{stem}.json"
            path.write_text(json.dumps(report.to_dict(), indent=2))
        elif fmt == "csv":
            path = out / f"{stem}.csv"
            with path.open("w", newline="") as fh:
                w = csv.writer(fh)
                names = [c for c in COLUMNS if c in report.columns]
                vol_keys = sorted({k for s in report.subjects for k in s.volumes_mm3})
                w.writerow(["subject"] + [f"{c}_dsc" for c in names] + [f"{k}_mm3" for k in vol_keys])
                for s in report.subjects:
                    w.writerow([s.subject] + [s.column(c, report.brain_metric) for c in names] + [s.volumes_mm3.get(k) for k in vol_keys])
                for stat in ("dsc", "lci", "uci"):
                    w.writerow([stat.upper()] + [getattr(report.columns[c], stat) for c in names] + [""] * len(vol_keys))
        elif fmt in ("markdown", "md"):
            path = out / f"{stem}.md"
            path.write_text(markdown_table(report))
        else:
            raise ValueError(f"unknown report format {fmt!r}")
        written[fmt] = path
    return written
