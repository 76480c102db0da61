"""
Point cloud seeding from the thresholded count volume and sparse-outlier
removal by a k-nearest-neighbour statistical filter.
"""

import dataclasses
import logging
import math
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

from src.backprojection import CountVolume
from src.constants import DEFAULT_KNN_K, DEFAULT_KNN_MULTIPLIER
from src.count_statistics import thresholds_by_slice
from src.exceptions import ConfigurationError, ParseError, QueryError

logger = logging.getLogger(__name__)

# relative slack when collecting ties at the k-th distance
TIE_RADIUS_SLACK = 1e-12

PLY_VERTEX_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("count", "<u4"), ("voxel", "<i8")])
_PLY_TYPES = {"float": "f4", "float32": "f4", "double": "f8", "float64": "f8", "uint": "u4", "uint32": "u4",
              "int": "i4", "int32": "i4", "int64": "i8", "uchar": "u1", "uint8": "u1", "short": "i2", "ushort": "u2"}


@dataclasses.dataclass(eq=False)
class PointCloud:
    points: np.ndarray
    voxel_index: Optional[np.ndarray] = None
    counts: Optional[np.ndarray] = None
    warnings: List[str] = dataclasses.field(default_factory=list)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        n = len(self.points)
        self.voxel_index = (np.full(n, -1, dtype=np.int64) if self.voxel_index is None
                            else np.asarray(self.voxel_index, dtype=np.int64))
        self.counts = np.zeros(n, dtype=np.uint32) if self.counts is None else np.asarray(self.counts, dtype=np.uint32)
        if len(self.voxel_index) != n or len(self.counts) != n:
            raise ConfigurationError("point cloud provenance arrays must match the point count")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def is_empty(self) -> bool:
        return len(self.points) == 0

    def subset(self, mask: np.ndarray) -> "PointCloud":
        return PointCloud(self.points[mask], self.voxel_index[mask], self.counts[mask], list(self.warnings))

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        if self.is_empty:
            raise QueryError("bounds of an empty point cloud")
        return self.points.min(axis=0), self.points.max(axis=0)


def extract_points(volume: CountVolume, decisions) -> PointCloud:
    """Voxel centroids whose count strictly exceeds the threshold of their slice."""
    lam = thresholds_by_slice(decisions, volume.num_slices)
    counts = volume.counts.astype(np.int64)
    selected = counts > lam[:, None, None]
    flat = np.flatnonzero(selected.ravel())
    cloud = PointCloud(volume.grid.centroids(flat), flat, counts.ravel()[flat].astype(np.uint32))
    if cloud.is_empty:
        cloud.warnings.append("no voxel count exceeds its slice threshold")
        logger.warning("Threshold selection produced an empty point cloud")
    else:
        logger.info(f"Selected {len(cloud)} voxel centroids out of {volume.grid.num_voxels} voxels")
    return cloud


class KdTree:
    """Balanced axis-median tree; neighbour ties are broken by point index."""

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self._tree = cKDTree(self.points, balanced_tree=True, compact_nodes=True) if len(self.points) else None

    def __len__(self) -> int:
        return len(self.points)

    def _distances(self, p: np.ndarray, idx: np.ndarray) -> np.ndarray:
        diff = self.points[idx] - p
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))

    def k_nearest(self, p, k: int) -> Tuple[np.ndarray, np.ndarray]:
        """(indices, distances) of the k nearest points, sorted by (distance, index)."""
        k = int(k)
        if k < 1 or k > len(self):
            raise QueryError(f"k={k} nearest neighbours requested from a cloud of {len(self)} points")
        p = np.asarray(p, dtype=np.float64).reshape(3)
        d, _ = self._tree.query(p, k=k)
        d_k = float(np.atleast_1d(d)[-1])
        candidates = np.asarray(self._tree.query_ball_point(p, r=d_k * (1.0 + TIE_RADIUS_SLACK) + 1e-300), dtype=np.int64)
        dist = self._distances(p, candidates)
        order = np.lexsort((candidates, dist))[:k]
        return candidates[order], dist[order]

    def mean_neighbour_distances(self, k: int, workers: int = 1) -> np.ndarray:
        """Mean distance from each point to its k nearest other points."""
        if k < 1 or k >= len(self):
            raise QueryError(f"k={k} neighbours need at least {k + 1} points, cloud has {len(self)}")
        d, _ = self._tree.query(self.points, k=k + 1, workers=max(1, int(workers)))
        # column 0 is the point itself (or a duplicate at distance 0)
        return d[:, 1:].mean(axis=1)


def knn_outlier_removal(
    cloud: PointCloud,
    k: int = DEFAULT_KNN_K,
    multiplier: float = DEFAULT_KNN_MULTIPLIER,
    workers: int = 1,
) -> PointCloud:
    """Single-pass statistical filter keeping points with mean k-NN distance <= mu + multiplier * sigma."""
    if k < 1:
        raise ConfigurationError(f"cloud.k must be >= 1, got {k}")
    if len(cloud) <= k:
        out = cloud.subset(np.ones(len(cloud), dtype=bool))
        message = f"outlier removal skipped: cloud of {len(cloud)} points needs more than k={k}"
        out.warnings.append(message)
        logger.warning(message)
        return out

    mean_d = KdTree(cloud.points).mean_neighbour_distances(k, workers=workers)
    n = len(mean_d)
    mu = math.fsum(mean_d.tolist()) / n
    sigma = math.sqrt(math.fsum(((mean_d - mu) ** 2).tolist()) / n)
    cutoff = mu + multiplier * sigma
    keep = mean_d <= cutoff
    out = cloud.subset(keep)
    logger.info(
        f"kNN outlier removal (k={k}, m={multiplier}): mu={mu:.4f} sigma={sigma:.4f} cutoff={cutoff:.4f}, "
        f"removed {n - int(keep.sum())} of {n} points"
    )
    return out


# XYZ / PLY

def write_xyz(path: Union[str, Path], cloud: PointCloud) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, cloud.points, fmt="%.9g")
    return path


def read_xyz(path: Union[str, Path]) -> PointCloud:
    path = Path(path)
    try:
        data = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except ValueError as e:
        raise ParseError(f"malformed XYZ file {path}: {e}") from e
    if data.size == 0:
        return PointCloud(np.zeros((0, 3)))
    if data.shape[1] < 3:
        raise ParseError(f"{path.name}: expected 3 columns, found {data.shape[1]}")
    return PointCloud(data[:, :3])


def write_ply(path: Union[str, Path], cloud: PointCloud) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = np.empty(len(cloud), dtype=PLY_VERTEX_DTYPE)
    records["x"], records["y"], records["z"] = cloud.points.T.astype(np.float32)
    records["count"] = cloud.counts
    records["voxel"] = cloud.voxel_index
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        "comment meshseed point cloud (voxel centroids)\n"
        f"element vertex {len(cloud)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uint count\n"
        "property int64 voxel\n"
        "end_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(records.tobytes())
    return path


def read_ply(path: Union[str, Path]) -> PointCloud:
    path = Path(path)
    data = path.read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ParseError(f"{path.name}: not a PLY file", offset=0)
    body_start = data.index(b"\n", end) + 1
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    count, fields, fmt = None, [], None
    for line in lines:
        tokens = line.split()
        if not tokens:
            continue
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            if tokens[1] != "vertex":
                break
            count = int(tokens[2])
        elif tokens[0] == "property" and count is not None:
            if tokens[1] == "list":
                raise ParseError(f"{path.name}: list properties are not supported")
            if tokens[1] not in _PLY_TYPES:
                raise ParseError(f"{path.name}: unknown property type {tokens[1]!r}")
            fields.append((tokens[2], "<" + _PLY_TYPES[tokens[1]]))
    if fmt != "binary_little_endian" or count is None:
        raise ParseError(f"{path.name}: only binary_little_endian vertex PLY is supported")
    dtype = np.dtype(fields)
    if len(data) - body_start < count * dtype.itemsize:
        raise ParseError(f"{path.name}: vertex data truncated", offset=len(data))
    rec = np.frombuffer(data, dtype=dtype, count=count, offset=body_start)
    names = dtype.names
    points = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    counts = rec["count"] if "count" in names else None
    voxels = rec["voxel"] if "voxel" in names else None
    return PointCloud(points, voxels, counts)
