"""Region-wise Dice, sensitivity, specificity and HD95 with BraTS empty-mask conventions."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import REGIONS, LabelVolume, RegionMask, derive_region_masks

METRIC_NAMES = ("dice", "sensitivity", "specificity", "hd95")
CSV_HEADER = ("subject", "region", "dice", "sensitivity", "specificity", "hd95")
AGGREGATE_SUBJECT = "__aggregate__"
AVERAGE_REGION = "average"

# 6-connectivity
_STRUCT = ndimage.generate_binary_structure(3, 1)


def _masks(pred, gt):
    p = pred.mask if isinstance(pred, RegionMask) else np.asarray(pred, dtype=bool)
    g = gt.mask if isinstance(gt, RegionMask) else np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p, g


def dice_score(pred, gt) -> float:
    p, g = _masks(pred, gt)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def sensitivity(pred, gt) -> float:
    p, g = _masks(pred, gt)
    tp = int(np.logical_and(p, g).sum())
    fn = int(np.logical_and(~p, g).sum())
    return 1.0 if tp + fn == 0 else tp / (tp + fn)


def specificity(pred, gt) -> float:
    p, g = _masks(pred, gt)
    tn = int(np.logical_and(~p, ~g).sum())
    fp = int(np.logical_and(p, ~g).sum())
    return 1.0 if tn + fp == 0 else tn / (tn + fp)


def surface(mask: np.ndarray) -> np.ndarray:
    """Set voxels with an unset 6-neighbour or on the grid boundary."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_STRUCT, border_value=0)


def surface_distances(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    """Distance (mm) from each surface voxel of ``src`` to the nearest surface voxel of ``dst``."""
    s_src, s_dst = surface(src), surface(dst)
    dist = ndimage.distance_transform_edt(~s_dst, sampling=spacing)
    return dist[s_src]


def extent_diagonal(shape, spacing) -> float:
    return float(np.sqrt(sum((n * s) ** 2 for n, s in zip(shape, spacing))))


def hd95(pred, gt, spacing=None) -> float:
    """Max of the two directed 95th-percentile surface distances in mm.

    Both empty gives 0; exactly one empty gives the diagonal of the volume's
    physical extent.
    """
    if isinstance(pred, RegionMask) and isinstance(gt, RegionMask):
        if not np.allclose(pred.spacing, gt.spacing):
            raise ValueError(f"spacings differ: {pred.spacing} vs {gt.spacing}")
        spacing = spacing or pred.spacing
    spacing = tuple(spacing or (1.0, 1.0, 1.0))
    p, g = _masks(pred, gt)
    if not p.any() and not g.any():
        return 0.0
    if not p.any() or not g.any():
        return extent_diagonal(p.shape, spacing)
    d_pg = np.percentile(surface_distances(p, g, spacing), 95)
    d_gp = np.percentile(surface_distances(g, p, spacing), 95)
    return float(max(d_pg, d_gp))


@dataclass(frozen=True)
class RegionMetrics:
    region: str
    dice: float
    sensitivity: float
    specificity: float
    hd95: float

    def __post_init__(self):
        for name in ("dice", "sensitivity", "specificity"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.hd95 < 0:
            raise ValueError("hd95 must be >= 0")


def region_metrics(pred: RegionMask, gt: RegionMask) -> RegionMetrics:
    return RegionMetrics(
        gt.region,
        dice_score(pred, gt),
        sensitivity(pred, gt),
        specificity(pred, gt),
        hd95(pred, gt),
    )


def evaluate_subject(pred: LabelVolume, gt: LabelVolume) -> list[RegionMetrics]:
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if not np.allclose(pred.spacing, gt.spacing):
        raise ValueError(f"spacings differ: {pred.spacing} vs {gt.spacing}")
    return [region_metrics(p, g) for p, g in zip(derive_region_masks(pred), derive_region_masks(gt))]


@dataclass
class MetricsReport:
    subjects: list
    per_subject: dict
    region_means: dict
    average: dict

    def to_rows(self) -> list:
        rows = []
        for sid in self.subjects:
            for m in self.per_subject[sid]:
                rows.append((sid, m.region, m.dice, m.sensitivity, m.specificity, m.hd95))
        for region in REGIONS:
            r = self.region_means[region]
            rows.append((AGGREGATE_SUBJECT, region, *(r[k] for k in METRIC_NAMES)))
        rows.append((AGGREGATE_SUBJECT, AVERAGE_REGION, *(self.average[k] for k in METRIC_NAMES)))
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for row in self.to_rows():
            w.writerow([row[0], row[1], *(repr(float(v)) for v in row[2:])])
        return buf.getvalue()


def aggregate(reports) -> MetricsReport:
    """Per-region means over subjects plus the cross-region average.

    ``reports`` maps subject id -> list of RegionMetrics (or is a sequence of
    (subject id, list) pairs). Subjects are sorted so input order is irrelevant.
    """
    items = dict(reports.items() if hasattr(reports, "items") else reports)
    if not items:
        raise ValueError("aggregate needs at least one subject")
    subjects = sorted(items)
    region_means = {}
    for region in REGIONS:
        vals = [next(m for m in items[s] if m.region == region) for s in subjects]
        region_means[region] = {k: float(np.mean([getattr(v, k) for v in vals])) for k in METRIC_NAMES}
    average = {k: float(np.mean([region_means[r][k] for r in REGIONS])) for k in METRIC_NAMES}
    return MetricsReport(subjects, {s: list(items[s]) for s in subjects}, region_means, average)


def read_csv_report(text: str) -> list:
    rows = list(csv.reader(io.StringIO(text)))
    if tuple(rows[0]) != CSV_HEADER:
        raise ValueError("unexpected CSV header")
    return [(r[0], r[1], *map(float, r[2:])) for r in rows[1:]]
