"""Segmentation quality metrics with explicit empty-mask semantics.

Surface metrics use the pooled symmetric formulation: directed boundary
distances are computed both ways, concatenated, and reduced by the 95th
percentile (hd95, linear interpolation) or the mean (assd).
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from protoseg.geometry import SegMask, boundary_mask

UNDEFINED = float("nan")


@dataclass
class MetricReport:
    """Per-class metric rows plus means over the defined entries."""

    per_class: dict[int, dict[str, float]] = field(default_factory=dict)

    METRICS = ("dice", "jaccard", "hd95", "assd")

    def mean(self, metric: str) -> float:
        vals = [row[metric] for row in self.per_class.values()
                if not math.isnan(row[metric])]
        return float(np.mean(vals)) if vals else UNDEFINED

    def as_rows(self) -> list[list]:
        rows = [[str(c)] + [row[m] for m in self.METRICS]
                for c, row in sorted(self.per_class.items())]
        rows.append(["mean"] + [self.mean(m) for m in self.METRICS])
        return rows


def dice_jaccard(pred: SegMask, gt: SegMask, class_id: int) -> tuple[float, float]:
    """Overlap ratios for one class.  Both-empty counts as perfect (1, 1);
    exactly one empty gives (0, 0)."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    a = pred.labels == class_id
    b = gt.labels == class_id
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return 1.0, 1.0
    if na == 0 or nb == 0:
        return 0.0, 0.0
    inter = int((a & b).sum())
    dice = 2.0 * inter / (na + nb)
    jaccard = inter / (na + nb - inter)
    return dice, jaccard


def surface_distances(pred: SegMask, gt: SegMask, class_id: int) -> tuple[float, float]:
    """(hd95, assd) between the class boundaries, pixel spacing 1.

    Returns (nan, nan) when either mask has no class boundary; callers
    exclude such entries from means.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    ba = np.argwhere(boundary_mask(pred.labels == class_id))
    bb = np.argwhere(boundary_mask(gt.labels == class_id))
    if len(ba) == 0 or len(bb) == 0:
        return UNDEFINED, UNDEFINED
    d_ab, _ = cKDTree(bb).query(ba)
    d_ba, _ = cKDTree(ba).query(bb)
    pooled = np.concatenate([d_ab, d_ba])
    hd95 = float(np.percentile(pooled, 95))  # linear interpolation
    assd = float(pooled.mean())
    return hd95, assd


def evaluate_masks(pred: SegMask, gt: SegMask) -> MetricReport:
    """Metric rows for every foreground class (1..C-1)."""
    report = MetricReport()
    for c in range(1, gt.num_classes):
        dice, jac = dice_jaccard(pred, gt, c)
        hd95, assd = surface_distances(pred, gt, c)
        report.per_class[c] = {"dice": dice, "jaccard": jac, "hd95": hd95, "assd": assd}
    return report
