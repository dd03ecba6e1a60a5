"""FOV-restricted segmentation metrics and per-dataset reports.

All metrics consider only pixels inside the field-of-view mask. Headline
numbers pool pixels across the whole test split; per-image values and their
mean are reported alongside, never derived from one another.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import FundusRecord
from .tiling import Binarization, ProbabilityMap, binarize


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


@dataclass
class ScoreSet:
    f1: float
    acc: float
    sensitivity: float
    specificity: float
    degenerate: tuple[str, ...] = ()


def confusion_counts(pred: np.ndarray, gt: np.ndarray, fov: np.ndarray) -> ConfusionCounts:
    """Pixel confusion over FOV pixels only."""
    if pred.shape != gt.shape or pred.shape != fov.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} gt {gt.shape} fov {fov.shape}")
    inside = fov > 0
    p = pred[inside] > 0
    g = gt[inside] > 0
    return ConfusionCounts(
        tp=int(np.sum(p & g)),
        fp=int(np.sum(p & ~g)),
        fn=int(np.sum(~p & g)),
        tn=int(np.sum(~p & ~g)),
    )


def scores(counts: ConfusionCounts) -> ScoreSet:
    """F1/ACC/SE/SP from confusion counts; empty denominators flag as 0."""
    degenerate = []

    def ratio(num, den, name):
        if den == 0:
            degenerate.append(name)
            return 0.0
        return num / den

    result = ScoreSet(
        f1=ratio(2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn, "f1"),
        acc=ratio(counts.tp + counts.tn, counts.total, "acc"),
        sensitivity=ratio(counts.tp, counts.tp + counts.fn, "sensitivity"),
        specificity=ratio(counts.tn, counts.tn + counts.fp, "specificity"),
    )
    result.degenerate = tuple(degenerate)
    if degenerate:
        warnings.warn(f"degenerate denominator for {', '.join(degenerate)}; reported as 0")
    return result


def _sweep(probs: np.ndarray, gt: np.ndarray, fov: np.ndarray):
    """Cumulative TP/FP at the end of each tie group, scores descending."""
    inside = fov > 0
    p = np.asarray(probs, dtype=np.float64)[inside]
    y = (np.asarray(gt)[inside] > 0).astype(np.int64)
    pos = int(y.sum())
    neg = y.size - pos
    if pos == 0 or neg == 0:
        raise ValueError("undefined AUC: ground truth inside the FOV has a single class")
    order = np.argsort(-p, kind="stable")
    p_sorted = p[order]
    y_sorted = y[order]
    tps = np.cumsum(y_sorted)
    fps = np.cumsum(1 - y_sorted)
    # keep only the last index of each run of equal scores
    keep = np.r_[np.nonzero(np.diff(p_sorted))[0], p_sorted.size - 1]
    return tps[keep], fps[keep], pos, neg


def roc_auc(probs: np.ndarray, gt: np.ndarray, fov: np.ndarray) -> float:
    """Exact trapezoidal ROC area with tied scores grouped."""
    tps, fps, pos, neg = _sweep(probs, gt, fov)
    tpr = np.r_[0.0, tps / pos]
    fpr = np.r_[0.0, fps / neg]
    return float(np.trapezoid(tpr, fpr))


def pr_auc(probs: np.ndarray, gt: np.ndarray, fov: np.ndarray) -> float:
    """Trapezoidal precision-recall area over the distinct-threshold sweep."""
    tps, fps, pos, _ = _sweep(probs, gt, fov)
    precision = tps / (tps + fps)
    recall = tps / pos
    # anchor the curve at recall 0 with the strictest threshold's precision
    precision = np.r_[precision[0], precision]
    recall = np.r_[0.0, recall]
    return float(np.trapezoid(precision, recall))


@dataclass
class ImageMetrics:
    id: str
    f1: float
    acc: float
    sensitivity: float
    specificity: float
    roc_auc: float
    pr_auc: float


@dataclass
class MetricReport:
    dataset: str
    binarization: str
    model: str
    pooled: dict
    per_image: list[ImageMetrics]
    per_image_mean: dict
    ids: list[str] = field(default_factory=list)


def evaluate(maps: dict[str, ProbabilityMap], records: list[FundusRecord],
             binarization: Binarization = Binarization.FIXED_05,
             dataset: str = "", model: str = "") -> MetricReport:
    """Score probability maps against records: pooled plus per-image metrics."""
    if not records:
        raise ValueError("no records to evaluate")
    missing = [r.id for r in records if r.id not in maps]
    if missing:
        raise KeyError(f"missing probability maps for: {', '.join(missing)}")

    pooled_counts = ConfusionCounts()
    pooled_probs, pooled_gt = [], []
    per_image = []
    for rec in records:
        pmap = maps[rec.id]
        if pmap.values.shape != rec.vessel_gt.shape:
            raise ValueError(f"{rec.id}: map shape {pmap.values.shape} does not match record")
        pred = binarize(pmap, rec.fov_mask, binarization)
        counts = confusion_counts(pred, rec.vessel_gt > 0.5, rec.fov_mask)
        pooled_counts = pooled_counts + counts
        inside = rec.fov_mask > 0
        pooled_probs.append(pmap.values[inside])
        pooled_gt.append(rec.vessel_gt[inside] > 0.5)
        s = scores(counts)
        try:
            img_roc = roc_auc(pmap.values, rec.vessel_gt > 0.5, rec.fov_mask)
            img_pr = pr_auc(pmap.values, rec.vessel_gt > 0.5, rec.fov_mask)
        except ValueError:
            img_roc = img_pr = math.nan
        per_image.append(ImageMetrics(rec.id, s.f1, s.acc, s.sensitivity,
                                      s.specificity, img_roc, img_pr))

    probs_all = np.concatenate(pooled_probs)
    gt_all = np.concatenate(pooled_gt)
    ones = np.ones_like(gt_all, dtype=np.uint8)
    pooled_s = scores(pooled_counts)
    pooled = {
        "f1": pooled_s.f1,
        "acc": pooled_s.acc,
        "sensitivity": pooled_s.sensitivity,
        "specificity": pooled_s.specificity,
        "roc_auc": roc_auc(probs_all, gt_all, ones),
        "pr_auc": pr_auc(probs_all, gt_all, ones),
        "counts": asdict(pooled_counts),
    }
    names = ("f1", "acc", "sensitivity", "specificity", "roc_auc", "pr_auc")
    mean = {
        name: float(np.nanmean([getattr(m, name) for m in per_image]))
        for name in names
    }
    return MetricReport(
        dataset=dataset, binarization=Binarization(binarization).value, model=model,
        pooled=pooled, per_image=per_image, per_image_mean=mean,
        ids=[r.id for r in records],
    )


def write_report(report: MetricReport, out_dir: str | Path) -> None:
    """Emit report.json plus a delimited table in benchmark column order."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "dataset": report.dataset,
        "binarization": report.binarization,
        "model": report.model,
        "pooled": report.pooled,
        "per_image_mean": report.per_image_mean,
        "per_image": [asdict(m) for m in report.per_image],
        "ids": report.ids,
    }
    (out_dir / "report.json").write_text(json.dumps(payload, indent=2) + "\n")

    cols = ("f1", "acc", "sensitivity", "specificity", "roc_auc", "pr_auc")
    lines = ["id\tF1\tACC\tSE\tSP\tROC\tPR"]
    for m in report.per_image:
        vals = "\t".join(f"{getattr(m, c):.4f}" for c in cols)
        lines.append(f"{m.id}\t{vals}")
    lines.append("mean\t" + "\t".join(f"{report.per_image_mean[c]:.4f}" for c in cols))
    lines.append("pooled\t" + "\t".join(f"{report.pooled[c]:.4f}" for c in cols))
    (out_dir / "report.tsv").write_text("\n".join(lines) + "\n")
