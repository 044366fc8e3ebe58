"""Exact segmentation metrics: overlap ratios, surface distances, components.

Degenerate-case conventions (the evaluation literature rarely states them, so
they are pinned here): when prediction and reference are BOTH empty, the four
overlap metrics score 1.0; a 0/0 in any single ratio otherwise scores 0.0.
Surface-distance metrics are undefined whenever either surface is empty; such
cases are flagged and excluded from aggregates, with the exclusion counted.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ConfigError, DimensionMismatchError, UndefinedMetricError


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class SurfacePointSet:
    """Integer voxel coordinates of boundary voxels plus physical spacing."""

    points: np.ndarray
    spacing: tuple[float, float, float]

    def __len__(self) -> int:
        return len(self.points)

    def physical(self) -> np.ndarray:
        return self.points.astype(np.float64) * np.asarray(self.spacing)


@dataclass
class MetricsReport:
    case_id: str
    dsc: float
    iou: float
    precision: float
    recall: float
    assd: float
    hd95: float
    cc_pred: int
    cc_gt: int
    distances_defined: bool = True


def _as_binary(vol) -> np.ndarray:
    return np.asarray(vol).astype(bool)


def confusion_counts(pred, gt) -> ConfusionCounts:
    pred, gt = _as_binary(pred), _as_binary(gt)
    if pred.shape != gt.shape:
        raise DimensionMismatchError("shape", gt.shape, pred.shape)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(pred.size - tp - fp - fn)
    return ConfusionCounts(tp, fp, fn, tn)


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def overlap_metrics(c: ConfusionCounts) -> tuple[float, float, float, float]:
    """(dsc, iou, precision, recall); both-empty masks score 1.0 by convention."""
    if c.tp + c.fp + c.fn == 0:
        return 1.0, 1.0, 1.0, 1.0
    dsc = _ratio(2.0 * c.tp, 2.0 * c.tp + c.fp + c.fn)
    iou = _ratio(c.tp, c.tp + c.fp + c.fn)
    precision = _ratio(c.tp, c.tp + c.fp)
    recall = _ratio(c.tp, c.tp + c.fn)
    return dsc, iou, precision, recall


def extract_surface(mask, spacing=(1.0, 1.0, 1.0)) -> SurfacePointSet:
    """Foreground voxels with a face-adjacent background or out-of-volume neighbor."""
    mask = _as_binary(mask)
    if mask.ndim != 3:
        raise DimensionMismatchError("rank", 3, mask.ndim)
    padded = np.pad(mask, 1)
    interior = np.ones_like(mask)
    for axis in range(3):
        for shift in (1, -1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    surface = mask & ~interior
    return SurfacePointSet(np.argwhere(surface), tuple(float(s) for s in spacing))


def directed_nn_distances(src: SurfacePointSet, dst: SurfacePointSet) -> np.ndarray:
    """Euclidean distance (mm) from each src point to its nearest dst point."""
    if len(src) == 0 or len(dst) == 0:
        raise UndefinedMetricError("surface distance undefined: empty surface point set")
    tree = cKDTree(dst.physical())
    dist, _ = tree.query(src.physical(), k=1)
    return np.asarray(dist, dtype=np.float64)


def assd(a: SurfacePointSet, b: SurfacePointSet) -> float:
    """Average symmetric surface distance in mm."""
    d_ab = directed_nn_distances(a, b)
    d_ba = directed_nn_distances(b, a)
    return float((d_ab.sum() + d_ba.sum()) / (len(a) + len(b)))


def hd95(a: SurfacePointSet, b: SurfacePointSet) -> float:
    """95th percentile of the pooled bidirectional nearest-distance list (mm)."""
    d_ab = directed_nn_distances(a, b)
    d_ba = directed_nn_distances(b, a)
    return float(np.percentile(np.concatenate([d_ab, d_ba]), 95))


def hd100(a: SurfacePointSet, b: SurfacePointSet) -> float:
    """Plain (maximum) Hausdorff distance in mm."""
    d_ab = directed_nn_distances(a, b)
    d_ba = directed_nn_distances(b, a)
    return float(max(d_ab.max(), d_ba.max()))


_STRUCTURES = {
    6: ndimage.generate_binary_structure(3, 1),
    26: ndimage.generate_binary_structure(3, 3),
}


def connected_components(mask, connectivity: int = 26) -> tuple[int, list[int]]:
    """Component count and descending component sizes under 6- or 26-adjacency."""
    if connectivity not in _STRUCTURES:
        raise ConfigError(f"connectivity must be 6 or 26, got {connectivity}")
    mask = _as_binary(mask)
    labels, count = ndimage.label(mask, structure=_STRUCTURES[connectivity])
    if count == 0:
        return 0, []
    sizes = np.bincount(labels.reshape(-1))[1:]
    return int(count), sorted((int(s) for s in sizes), reverse=True)


def evaluate_case(pred, gt, spacing, case_id: str) -> MetricsReport:
    """All metrics for one case; distance metrics flagged when undefined."""
    pred, gt = _as_binary(pred), _as_binary(gt)
    if pred.shape != gt.shape:
        raise DimensionMismatchError("shape", gt.shape, pred.shape)
    dsc, iou, precision, recall = overlap_metrics(confusion_counts(pred, gt))
    surf_p = extract_surface(pred, spacing)
    surf_g = extract_surface(gt, spacing)
    try:
        assd_mm = assd(surf_p, surf_g)
        hd95_mm = hd95(surf_p, surf_g)
        defined = True
    except UndefinedMetricError as err:
        err.case_id = case_id
        assd_mm = hd95_mm = float("nan")
        defined = False
    cc_p, _ = connected_components(pred, 26)
    cc_g, _ = connected_components(gt, 26)
    return MetricsReport(case_id, dsc, iou, precision, recall, assd_mm, hd95_mm, cc_p, cc_g, defined)


_FRACTIONS = ("dsc", "iou", "precision", "recall")
_DISTANCES = ("assd", "hd95")
_COUNTS = ("cc_pred", "cc_gt")
_COLUMNS = _FRACTIONS + ("assd", "hd95") + _COUNTS


def aggregate_reports(reports: list[MetricsReport]) -> dict[str, dict[str, float]]:
    """Mean/std/max per metric; undefined distances excluded and counted."""
    if not reports:
        raise ConfigError("cannot aggregate an empty report list")
    out: dict[str, dict[str, float]] = {"mean": {}, "std": {}, "max": {}}
    for name in _COLUMNS:
        values = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        if name in _DISTANCES:
            values = values[np.isfinite(values)]
        if values.size == 0:
            out["mean"][name] = out["std"][name] = out["max"][name] = float("nan")
            continue
        out["mean"][name] = float(values.mean())
        out["std"][name] = float(values.std())
        out["max"][name] = float(values.max())
    out["excluded_distance_cases"] = sum(1 for r in reports if not r.distances_defined)
    return out


REPORT_HEADER = "case\tdsc\tiou\tprecision\trecall\tassd_mm\thd95_mm\tcc_pred\tcc_gt"


def _report_line(r: MetricsReport) -> str:
    return "\t".join(
        [
            r.case_id,
            f"{r.dsc:.6f}",
            f"{r.iou:.6f}",
            f"{r.precision:.6f}",
            f"{r.recall:.6f}",
            f"{r.assd:.6f}",
            f"{r.hd95:.6f}",
            str(r.cc_pred),
            str(r.cc_gt),
        ]
    )


def write_report(path, reports: list[MetricsReport], missing: list[str] | None = None) -> None:
    """Tab-separated per-case lines plus #mean/#std/#max (and #missing) footers."""
    lines = [REPORT_HEADER]
    lines.extend(_report_line(r) for r in reports)
    if reports:
        agg = aggregate_reports(reports)
        for kind in ("mean", "std", "max"):
            vals = agg[kind]
            lines.append(
                "#" + kind + "\t" + "\t".join(f"{vals[name]:.6f}" for name in _COLUMNS)
            )
        if agg["excluded_distance_cases"]:
            lines.append(f"#excluded_distances\t{agg['excluded_distance_cases']}")
    for stem in missing or []:
        lines.append(f"#missing\t{stem}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_report(path) -> tuple[list[MetricsReport], dict[str, list[str] | dict]]:
    """Parse a report file back into reports plus footer data."""
    reports: list[MetricsReport] = []
    footers: dict = {"missing": [], "aggregates": {}}
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != REPORT_HEADER:
        raise ConfigError("malformed report: missing header")
    for line in lines[1:]:
        if not line.strip():
            continue
        parts = line.split("\t")
        if line.startswith("#missing"):
            footers["missing"].append(parts[1])
        elif line.startswith("#excluded_distances"):
            footers["excluded_distances"] = int(parts[1])
        elif line.startswith("#"):
            footers["aggregates"][parts[0][1:]] = {
                name: float(v) for name, v in zip(_COLUMNS, parts[1:])
            }
        else:
            vals = parts
            reports.append(
                MetricsReport(
                    vals[0],
                    *(float(v) for v in vals[1:7]),
                    int(vals[7]),
                    int(vals[8]),
                    distances_defined=np.isfinite(float(vals[5])),
                )
            )
    return reports, footers
