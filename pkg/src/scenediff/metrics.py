"""Evaluation metrics: Chamfer distance, Jensen-Shannon divergence over
occupancy histograms (bird's-eye view or full 3-D), and voxel occupancy IoU.

Conventions are pinned here because several exist in the literature: Chamfer
is the halved sum of the two directed mean nearest-neighbor distances
(non-squared, meters); divergences use the natural log and are bounded by
ln 2; histogram binning parameters are recorded in every report.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud, voxelize

LN2 = float(np.log(2.0))


@dataclass(frozen=True)
class MetricReport:
    """One scan pair's scores plus the binning used to compute them."""

    cd: float
    jsd_bev: float
    jsd_3d: float
    iou: dict
    jsd_resolution: float = 0.5
    extent: float = 50.0
    scan_id: str = ""

    def __post_init__(self):
        vals = [self.cd, self.jsd_bev, self.jsd_3d, *self.iou.values()]
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("metric values must be finite")
        for v in self.iou.values():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"IoU {v} outside [0, 1]")
        for v in (self.jsd_bev, self.jsd_3d):
            if not -1e-12 <= v <= LN2 + 1e-12:
                raise ValueError(f"JSD {v} outside [0, ln 2]")

    def to_json_line(self) -> str:
        rec = {
            "scan_id": self.scan_id,
            "cd": self.cd,
            "jsd_bev": self.jsd_bev,
            "jsd_3d": self.jsd_3d,
            "iou": {f"{r:g}": v for r, v in sorted(self.iou.items(), reverse=True)},
            "jsd_resolution": self.jsd_resolution,
            "extent": self.extent,
        }
        return json.dumps(rec)


CSV_COLUMNS = ["scan_id", "cd", "jsd_bev", "jsd_3d", "iou@0.5", "iou@0.2", "iou@0.1"]


def write_reports_csv(reports: list, path) -> None:
    """Aggregate CSV with the fixed column order (one row per scan pair)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for r in reports:
            w.writerow(
                [
                    r.scan_id,
                    f"{r.cd:.6f}",
                    f"{r.jsd_bev:.6f}",
                    f"{r.jsd_3d:.6f}",
                    f"{r.iou.get(0.5, float('nan')):.6f}",
                    f"{r.iou.get(0.2, float('nan')):.6f}",
                    f"{r.iou.get(0.1, float('nan')):.6f}",
                ]
            )


def chamfer(a: PointCloud, b: PointCloud) -> float:
    """Symmetric mean nearest-neighbor distance, halved.

    kd-trees accelerate the queries; the result equals the brute-force
    nearest-neighbor computation.
    """
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer requires non-empty clouds")
    d_ab, _ = cKDTree(b.points).query(a.points, k=1)
    d_ba, _ = cKDTree(a.points).query(b.points, k=1)
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))


def _cell_histogram(pc: PointCloud, resolution: float, extent: float, bev: bool):
    origin = _snapped_origin(resolution, extent)
    dims = 2 if bev else 3
    idx = np.floor((pc.points[:, :dims] - origin[:dims]) / resolution).astype(np.int64)
    cells, counts = np.unique(idx, axis=0, return_counts=True)
    total = len(pc)
    return {tuple(cell): c / total for cell, c in zip(cells, counts)}


def jsd(
    a: PointCloud,
    b: PointCloud,
    mode: str = "bev",
    resolution: float = 0.5,
    extent: float = 50.0,
) -> float:
    """Jensen-Shannon divergence between normalized occupancy-count
    histograms, natural log, in [0, ln 2].

    ``mode`` is "bev" (z dropped, 2-D lattice) or "3d". Cells empty in both
    clouds contribute nothing.
    """
    if mode not in ("bev", "3d"):
        raise ValueError("mode must be 'bev' or '3d'")
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    if len(a) == 0 or len(b) == 0:
        raise ValueError("jsd requires non-empty clouds")
    p = _cell_histogram(a, resolution, extent, bev=(mode == "bev"))
    q = _cell_histogram(b, resolution, extent, bev=(mode == "bev"))
    div = 0.0
    for cell in p.keys() | q.keys():
        pi = p.get(cell, 0.0)
        qi = q.get(cell, 0.0)
        mi = 0.5 * (pi + qi)
        if pi > 0:
            div += 0.5 * pi * np.log(pi / mi)
        if qi > 0:
            div += 0.5 * qi * np.log(qi / mi)
    return float(min(max(div, 0.0), LN2))


def _snapped_origin(resolution: float, extent: float) -> np.ndarray:
    """Default lattice anchor: (-extent,)*3 snapped onto the resolution grid."""
    o = -np.floor(extent / resolution) * resolution
    return np.full(3, o)


def voxel_iou(
    pred: PointCloud, gt: PointCloud, resolution: float, origin=None
) -> float:
    """Intersection over union of occupied voxel sets at a shared origin.

    Two empty clouds are identical scenes, defined as IoU 1.
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    if origin is None:
        origin = np.zeros(3)
    occ_p = voxelize(pred, resolution, origin).occupied
    occ_g = voxelize(gt, resolution, origin).occupied
    union = occ_p | occ_g
    if not union:
        return 1.0
    return len(occ_p & occ_g) / len(union)


def evaluate_pair(
    pred: PointCloud,
    gt: PointCloud,
    voxel_resolutions=(0.5, 0.2, 0.1),
    jsd_resolution: float = 0.5,
    extent: float = 50.0,
    scan_id: str = "",
) -> MetricReport:
    """Full metric suite for one prediction/ground-truth pair."""
    iou = {
        float(r): voxel_iou(pred, gt, float(r), _snapped_origin(float(r), extent))
        for r in voxel_resolutions
    }
    return MetricReport(
        cd=chamfer(pred, gt),
        jsd_bev=jsd(pred, gt, "bev", jsd_resolution, extent),
        jsd_3d=jsd(pred, gt, "3d", jsd_resolution, extent),
        iou=iou,
        jsd_resolution=jsd_resolution,
        extent=extent,
        scan_id=scan_id,
    )
