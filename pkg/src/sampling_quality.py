"""
Sampling quality of a seeded point cloud and compression of its mesh.

A point is an optimum selection when its distance to the nearest ground-truth
interface is at most half a voxel diagonal, ``grid_res * sqrt(3) / 2``.
"""

import csv
import dataclasses
import logging
import math
from fractions import Fraction
from pathlib import Path
from typing import Optional, Union

import numpy as np

from src.backprojection import GridSpec
from src.phantom_models import Phantom
from src.point_cloud import PointCloud
from src.tetrahedralization import TetMesh
from src.utils import read_json, write_json

logger = logging.getLogger(__name__)

HISTOGRAM_BINS = 50


def optimum_tolerance(grid_res: float) -> float:
    return grid_res * math.sqrt(3.0) / 2.0


@dataclasses.dataclass(eq=False)
class QualityReport:
    distances: np.ndarray
    grid_res: float
    tolerance: float
    optimum_fraction: Optional[float]
    mean_d: Optional[float]
    p95_d: Optional[float]
    flags: list = dataclasses.field(default_factory=list)

    @property
    def num_points(self) -> int:
        return int(len(self.distances))

    @classmethod
    def from_distances(cls, distances, grid_res: float) -> "QualityReport":
        d = np.asarray(distances, dtype=np.float64).ravel()
        tol = optimum_tolerance(grid_res)
        if d.size == 0:
            return cls(d, grid_res, tol, None, None, None, flags=["empty cloud: optimum fraction undefined"])
        return cls(
            distances=d,
            grid_res=grid_res,
            tolerance=tol,
            optimum_fraction=float(np.count_nonzero(d <= tol)) / d.size,
            mean_d=float(d.mean()),
            p95_d=float(np.quantile(d, 0.95)),
        )

    def to_dict(self) -> dict:
        return {
            "num_points": self.num_points,
            "grid_res_mm": self.grid_res,
            "tolerance_mm": self.tolerance,
            "optimum_fraction": self.optimum_fraction,
            "mean_distance_mm": self.mean_d,
            "p95_distance_mm": self.p95_d,
            "max_distance_mm": float(self.distances.max()) if self.num_points else None,
            "flags": list(self.flags),
        }


def cloud_quality(cloud: PointCloud, truth: Phantom, grid_res: float, workers: int = 1) -> QualityReport:
    if cloud.is_empty:
        logger.warning("Quality of an empty cloud requested; report is flagged")
        return QualityReport.from_distances([], grid_res)
    report = QualityReport.from_distances(truth.surface_distances(cloud.points, workers=workers), grid_res)
    logger.info(
        f"Cloud quality: {report.optimum_fraction:.1%} of {report.num_points} points within "
        f"{report.tolerance:.4f} mm (mean {report.mean_d:.4f} mm, p95 {report.p95_d:.4f} mm)"
    )
    return report


def compression_ratio(mesh: TetMesh, grid: GridSpec) -> Fraction:
    """Mesh cells per voxel of the equivalent regular grid, as an exact rational."""
    return Fraction(mesh.num_cells, grid.num_voxels)


def interface_density_ratio(mesh: TetMesh, truth: Phantom, grid_res: float, band: float = 2.0,
                            workers: int = 1) -> Optional[float]:
    """Median circumradius of cells centred within ``band * grid_res`` of an
    interface divided by the median circumradius of all other cells."""
    centers, radii = mesh.circumspheres()
    near = truth.surface_distances(centers, workers=workers) <= band * grid_res
    if not near.any() or near.all():
        logger.warning("Interface density ratio undefined: one of the cell groups is empty")
        return None
    ratio = float(np.median(radii[near]) / np.median(radii[~near]))
    logger.info(
        f"Interface density: {int(near.sum())} cells near interfaces, {int((~near).sum())} elsewhere, "
        f"median circumradius ratio {ratio:.3f}"
    )
    return ratio


def write_quality_report(path: Union[str, Path], report: QualityReport, extra: Optional[dict] = None) -> Path:
    payload = report.to_dict()
    if extra:
        payload.update(extra)
    return write_json(path, payload)


def read_quality_report(path: Union[str, Path]) -> dict:
    return read_json(path)


def write_distances_csv(path: Union[str, Path], cloud: PointCloud, report: QualityReport) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["x_mm", "y_mm", "z_mm", "voxel", "count", "distance_mm", "optimum"])
        for p, voxel, count, d in zip(cloud.points, cloud.voxel_index, cloud.counts, report.distances):
            writer.writerow([repr(float(p[0])), repr(float(p[1])), repr(float(p[2])), int(voxel), int(count),
                             repr(float(d)), int(d <= report.tolerance)])
    return path


def write_histogram(path: Union[str, Path], report: QualityReport, bins: int = HISTOGRAM_BINS) -> Path:
    """Gnuplot-ready histogram: bin centre, count, cumulative fraction."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# distance histogram, tolerance {report.tolerance:.6g} mm, {report.num_points} points\n")
        f.write("# bin_center_mm count cumulative_fraction\n")
        if report.num_points == 0:
            return path
        upper = max(float(report.distances.max()), report.tolerance)
        hist, edges = np.histogram(report.distances, bins=bins, range=(0.0, upper if upper > 0 else 1.0))
        cumulative = np.cumsum(hist) / report.num_points
        for lo, hi, n, c in zip(edges[:-1], edges[1:], hist, cumulative):
            f.write(f"{0.5 * (lo + hi):.6g} {int(n)} {c:.6f}\n")
    return path
