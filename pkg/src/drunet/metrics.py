"""Segmentation metrics per tumor region: DSC, sensitivity, specificity, HD95."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

REGIONS = ("wt", "tc", "et")
REGION_LABELS = {"wt": (1, 2, 4), "tc": (1, 4), "et": (4,)}
METRICS = ("dsc", "sensitivity", "specificity", "hd95")


@dataclass(frozen=True)
class MetricConventions:
    """Edge-case rules; swap in a different instance to change them."""

    both_empty_dice: float = 1.0
    one_empty_dice: float = 0.0
    empty_truth_sensitivity: float = 1.0
    full_truth_specificity: float = 1.0
    both_empty_hd: float = 0.0
    # None means: the volume diagonal in mm
    one_empty_hd: float | None = None
    percentile: float = 95.0
    percentile_method: str = "linear"


DEFAULT_CONVENTIONS = MetricConventions()


@dataclass
class RegionMaskSet:
    wt: np.ndarray
    tc: np.ndarray
    et: np.ndarray

    def __getitem__(self, region: str) -> np.ndarray:
        return getattr(self, region)


def region_masks(labels: np.ndarray) -> RegionMaskSet:
    labels = np.asarray(labels)
    bad = ~np.isin(labels, (0, 1, 2, 4))
    if bad.any():
        raise ValueError(f"foreign label values {sorted(set(labels[bad].tolist()))[:5]}")
    return RegionMaskSet(*(np.isin(labels, REGION_LABELS[r]) for r in REGIONS))


def _check_same(a, b):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"dimension mismatch: {np.shape(a)} vs {np.shape(b)}")


def dice(a: np.ndarray, b: np.ndarray, conventions: MetricConventions = DEFAULT_CONVENTIONS) -> float:
    _check_same(a, b)
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    sa, sb = int(a.sum()), int(b.sum())
    if sa == 0 and sb == 0:
        return conventions.both_empty_dice
    if sa == 0 or sb == 0:
        return conventions.one_empty_dice
    return 2.0 * int((a & b).sum()) / (sa + sb)


def sensitivity(pred, truth, conventions: MetricConventions = DEFAULT_CONVENTIONS) -> float:
    _check_same(pred, truth)
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    positives = int(truth.sum())
    if positives == 0:
        return conventions.empty_truth_sensitivity
    return int((pred & truth).sum()) / positives


def specificity(pred, truth, conventions: MetricConventions = DEFAULT_CONVENTIONS) -> float:
    _check_same(pred, truth)
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    negatives = int((~truth).sum())
    if negatives == 0:
        return conventions.full_truth_specificity
    return int((~pred & ~truth).sum()) / negatives


def surface(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one face neighbour outside the mask.

    Positions beyond the array border count as outside.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure, border_value=0)


def surface_distances(a: np.ndarray, b: np.ndarray, spacing) -> np.ndarray:
    """Distance from each surface voxel of ``a`` to the nearest surface voxel of ``b``."""
    sa, sb = surface(a), surface(b)
    dist = ndimage.distance_transform_edt(~sb, sampling=spacing)
    return dist[sa]


def hausdorff95(pred, truth, spacing_mm=None, conventions: MetricConventions = DEFAULT_CONVENTIONS) -> float:
    _check_same(pred, truth)
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    spacing = tuple(float(s) for s in (spacing_mm or (1.0,) * pred.ndim))
    has_p, has_t = pred.any(), truth.any()
    if not has_p and not has_t:
        return conventions.both_empty_hd
    if not has_p or not has_t:
        if conventions.one_empty_hd is not None:
            return conventions.one_empty_hd
        return float(np.sqrt(sum((d * s) ** 2 for d, s in zip(pred.shape, spacing))))
    q, method = conventions.percentile, conventions.percentile_method
    forward = np.percentile(surface_distances(pred, truth, spacing), q, method=method)
    back = np.percentile(surface_distances(truth, pred, spacing), q, method=method)
    return float(max(forward, back))


@dataclass
class MetricsReport:
    subject_id: str
    values: dict[str, dict[str, float]] = field(default_factory=dict)

    def rows(self):
        for region in REGIONS:
            v = self.values[region]
            yield [self.subject_id, region.upper()] + [v[m] for m in METRICS]


def evaluate_case(
    pred_labels,
    truth_labels,
    subject_id: str = "case",
    spacing_mm=(1.0, 1.0, 1.0),
    conventions: MetricConventions = DEFAULT_CONVENTIONS,
) -> MetricsReport:
    _check_same(pred_labels, truth_labels)
    pm, tm = region_masks(pred_labels), region_masks(truth_labels)
    report = MetricsReport(subject_id)
    for region in REGIONS:
        p, t = pm[region], tm[region]
        report.values[region] = {
            "dsc": dice(p, t, conventions),
            "sensitivity": sensitivity(p, t, conventions),
            "specificity": specificity(p, t, conventions),
            "hd95": hausdorff95(p, t, spacing_mm, conventions),
        }
    return report


def cohort_summary(reports: list[MetricsReport]) -> dict[str, dict[str, tuple[float, float]]]:
    """Mean and population SD of every metric per region."""
    summary = {}
    for region in REGIONS:
        summary[region] = {}
        for metric in METRICS:
            vals = np.array([r.values[region][metric] for r in reports], dtype=np.float64)
            summary[region][metric] = (float(vals.mean()), float(vals.std()))
    return summary


def format_table(summary) -> str:
    """Cohort summary laid out as DSC and HD95 columns per region, mean (SD)."""
    head = ["", *(f"DSC {r.upper()}" for r in ("wt", "et", "tc")), *(f"HD95 {r.upper()}" for r in ("wt", "et", "tc"))]
    cells = [f"{summary[r]['dsc'][0]:.4f} ({summary[r]['dsc'][1]:.4f})" for r in ("wt", "et", "tc")]
    cells += [f"{summary[r]['hd95'][0]:.2f} ({summary[r]['hd95'][1]:.2f})" for r in ("wt", "et", "tc")]
    return "\t".join(head) + "\n" + "\t".join(["cohort", *cells])


def write_report_csv(path, reports: list[MetricsReport], skipped: list[str] = ()) -> None:
    """Per-case rows, then cohort mean and SD rows per region, then skipped subjects."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["subject", "region", *METRICS])
        for report in reports:
            for row in report.rows():
                writer.writerow(row[:2] + [_fmt(v) for v in row[2:]])
        if reports:
            summary = cohort_summary(reports)
            for stat, k in (("cohort_mean", 0), ("cohort_sd", 1)):
                for region in REGIONS:
                    writer.writerow([stat, region.upper(), *(_fmt(summary[region][m][k]) for m in METRICS)])
        for subject in skipped:
            writer.writerow([subject, "skipped", "", "", "", ""])


def _fmt(v: float) -> str:
    return f"{v:.6f}"
