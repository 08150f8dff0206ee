"""RVOS evaluation metrics: Overall/Mean IoU, Precision@threshold, mAP over
IoU thresholds 0.5:0.05:0.95, region similarity J, contour accuracy F, and
their average J&F.

A sample is one (predicted mask, ground-truth mask, confidence) triple,
usually one annotated frame. Empty-mask conventions keep every metric total:
IoU is 1 when both masks are empty and 0 when exactly one is.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError

IOU_THRESHOLDS = tuple((50 + 5 * i) / 100 for i in range(10))  # 0.5 ... 0.95
PRECISION_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)
BOUNDARY_TOLERANCE_PX = 1.0


@dataclass
class SamplePrediction:
    pred: np.ndarray  # (H, W) binary
    gt: np.ndarray  # (H, W) binary
    confidence: float = 1.0


@dataclass
class MetricsReport:
    overall_iou: float
    mean_iou: float
    precision_at: dict = field(default_factory=dict)  # threshold -> fraction
    map: float = 0.0
    j: float = 0.0
    f: float = 0.0
    jf: float = 0.0


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union; 1.0 for empty/empty, 0.0 for empty/nonempty."""
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def precision_at(samples: list, zeta: float) -> float:
    """Fraction of samples with IoU strictly greater than ``zeta``."""
    if not samples:
        raise ShapeError("precision_at requires at least one sample")
    ious = [iou(s.pred, s.gt) for s in samples]
    return float(sum(1 for v in ious if v > zeta) / len(ious))


def average_precision(samples: list, threshold: float) -> float:
    """101-point interpolated AP at one IoU threshold.

    Samples are ranked by descending confidence (stable, so equal confidences
    keep their input order); each is a true positive iff its IoU exceeds the
    threshold, with one ground truth per sample.
    """
    conf = np.array([s.confidence for s in samples])
    order = np.argsort(-conf, kind="stable")
    tp = np.array([iou(samples[i].pred, samples[i].gt) > threshold for i in order])
    cum_tp = np.cumsum(tp)
    ranks = np.arange(1, len(samples) + 1)
    precision = cum_tp / ranks
    recall = cum_tp / len(samples)
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return float(ap / 101.0)


def mean_average_precision(samples: list) -> float:
    """AP averaged over the ten IoU thresholds 0.5:0.05:0.95."""
    if not samples:
        raise ShapeError("mean_average_precision requires at least one sample")
    return float(np.mean([average_precision(samples, t) for t in IOU_THRESHOLDS]))


def region_similarity_j(samples: list) -> float:
    """Mean IoU over samples (identical to Mean IoU by definition)."""
    if not samples:
        raise ShapeError("region_similarity_j requires at least one sample")
    return float(np.mean([iou(s.pred, s.gt) for s in samples]))


def _boundary(mask: np.ndarray) -> np.ndarray:
    """Mask minus its 4-neighbourhood erosion (outside counts as background)."""
    m = mask.astype(bool)
    p = np.pad(m, 1, constant_values=False)
    eroded = (p[1:-1, 1:-1] & p[:-2, 1:-1] & p[2:, 1:-1]
              & p[1:-1, :-2] & p[1:-1, 2:])
    return m & ~eroded


def contour_accuracy_f(pred: np.ndarray, gt: np.ndarray,
                       tolerance_px: float = BOUNDARY_TOLERANCE_PX) -> float:
    """Boundary F1: precision/recall of boundary pixels within a pixel radius."""
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    bp = np.argwhere(_boundary(pred))
    bg = np.argwhere(_boundary(gt))
    if len(bp) == 0 and len(bg) == 0:
        return 1.0
    if len(bp) == 0 or len(bg) == 0:
        return 0.0
    tol2 = tolerance_px * tolerance_px
    d2 = ((bp[:, None, :] - bg[None, :, :]) ** 2).sum(axis=-1)
    precision = float((d2.min(axis=1) <= tol2).mean())
    recall = float((d2.min(axis=0) <= tol2).mean())
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def evaluate(samples: list) -> MetricsReport:
    """Aggregate every metric over a non-empty sample list."""
    if not samples:
        raise ShapeError("evaluate requires at least one sample")
    inter_total = 0
    union_total = 0
    for s in samples:
        p = s.pred.astype(bool)
        g = s.gt.astype(bool)
        inter_total += int(np.logical_and(p, g).sum())
        union_total += int(np.logical_or(p, g).sum())
    overall = 1.0 if union_total == 0 else inter_total / union_total
    mean_iou = region_similarity_j(samples)
    f = float(np.mean([contour_accuracy_f(s.pred, s.gt) for s in samples]))
    j = mean_iou
    return MetricsReport(
        overall_iou=float(overall),
        mean_iou=mean_iou,
        precision_at={z: precision_at(samples, z) for z in PRECISION_THRESHOLDS},
        map=mean_average_precision(samples),
        j=j,
        f=f,
        jf=(j + f) / 2.0,
    )


# -- flat key-value serialization ----------------------------------------------


def serialize_report(report: MetricsReport) -> str:
    """One metric per line, fixed key names, six decimal places."""
    lines = [
        f"overall_iou {report.overall_iou:.6f}",
        f"mean_iou {report.mean_iou:.6f}",
    ]
    for z in PRECISION_THRESHOLDS:
        lines.append(f"precision_at_{z:g} {report.precision_at[z]:.6f}")
    lines.append(f"map {report.map:.6f}")
    lines.append(f"j {report.j:.6f}")
    lines.append(f"f {report.f:.6f}")
    lines.append(f"jf {report.jf:.6f}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> MetricsReport:
    values = {}
    for line in text.strip().splitlines():
        key, val = line.rsplit(" ", 1)
        values[key] = float(val)
    return MetricsReport(
        overall_iou=values["overall_iou"],
        mean_iou=values["mean_iou"],
        precision_at={z: values[f"precision_at_{z:g}"] for z in PRECISION_THRESHOLDS},
        map=values["map"],
        j=values["j"],
        f=values["f"],
        jf=values["jf"],
    )
