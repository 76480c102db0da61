"""
Ray-driven backprojection of binary edge maps into a regular voxel grid.

Every edge pixel casts the ray returned by the acquisition geometry; each
voxel whose interior the ray crosses gains one count. In saturation mode
(default) a voxel gains at most one count per view, so 0 <= n_l <= K.
``suppress_non_maxima`` optionally thins the resulting count shells to
their crest before thresholding.
Voxels are indexed x-fastest: l = ix + nx * (iy + ny * iz); count arrays are
shaped (nz, ny, nx).
"""

import dataclasses
import logging
import math
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from src.acquisition_geometry import AcquisitionGeometry, Ray
from src.exceptions import ConfigurationError, ParseError, StageMismatchError
from src.utils import chunk_ranges, parallel_map, read_json, read_raw, write_json, write_raw

logger = logging.getLogger(__name__)

RAYS_PER_CHUNK = 2048
SEGMENT_EPS = 1e-10


@dataclasses.dataclass(frozen=True)
class GridSpec:
    dims: Tuple[int, int, int]
    origin: Tuple[float, float, float]
    voxel_size: Tuple[float, float, float]

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        size = tuple(float(s) for s in self.voxel_size)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or min(dims) < 2:
            raise ConfigurationError(f"grid.dims must be three values >= 2, got {self.dims}")
        if len(size) != 3 or min(size) <= 0:
            raise ConfigurationError(f"grid voxel size must be positive, got {self.voxel_size}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", size)
        object.__setattr__(self, "origin", origin)

    @classmethod
    def centered(cls, dims: Sequence[int], extent_mm: Union[float, Sequence[float]]) -> "GridSpec":
        """Grid of ``dims`` voxels spanning ``extent_mm`` per axis, centered on the isocenter."""
        dims = tuple(int(n) for n in dims)
        extent = np.broadcast_to(np.asarray(extent_mm, dtype=np.float64), (3,))
        size = extent / np.asarray(dims, dtype=np.float64)
        return cls(dims=dims, origin=tuple(-extent / 2.0), voxel_size=tuple(size))

    @property
    def num_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.origin)

    @property
    def upper(self) -> np.ndarray:
        return self.lower + np.asarray(self.dims) * np.asarray(self.voxel_size)

    @property
    def resolution(self) -> float:
        """Voxel edge length (the largest one for anisotropic grids)."""
        return float(max(self.voxel_size))

    @property
    def shape(self) -> Tuple[int, int, int]:
        nx, ny, nz = self.dims
        return (nz, ny, nx)

    def flat_index(self, ix, iy, iz):
        nx, ny, _ = self.dims
        return np.asarray(ix) + nx * (np.asarray(iy) + ny * np.asarray(iz))

    def unravel(self, flat) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        nx, ny, _ = self.dims
        flat = np.asarray(flat, dtype=np.int64)
        return flat % nx, (flat // nx) % ny, flat // (nx * ny)

    def centroids(self, flat) -> np.ndarray:
        ix, iy, iz = self.unravel(flat)
        idx = np.stack([ix, iy, iz], axis=-1).astype(np.float64)
        return self.lower + (idx + 0.5) * np.asarray(self.voxel_size)

    def centroid(self, flat: int) -> np.ndarray:
        return self.centroids(np.array([flat]))[0]

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "origin_mm": list(self.origin), "voxel_size_mm": list(self.voxel_size)}

    @classmethod
    def from_dict(cls, payload: dict) -> "GridSpec":
        return cls(dims=tuple(payload["dims"]), origin=tuple(payload["origin_mm"]), voxel_size=tuple(payload["voxel_size_mm"]))


def _slab_interval(grid: GridSpec, origins: np.ndarray, dirs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    lo, hi = grid.lower, grid.upper
    with np.errstate(divide="ignore", invalid="ignore"):
        t_lo = (lo - origins) / dirs
        t_hi = (hi - origins) / dirs
    inside = (origins > lo) & (origins < hi)
    moving = dirs != 0
    t_enter = np.where(moving, np.minimum(t_lo, t_hi), np.where(inside, -np.inf, np.inf))
    t_exit = np.where(moving, np.maximum(t_lo, t_hi), np.where(inside, np.inf, -np.inf))
    return np.maximum(t_enter.max(axis=1), 0.0), t_exit.min(axis=1)


def _in_grid_plane(grid: GridSpec, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Rays running inside a grid plane touch no voxel interior."""
    frac = (origins - grid.lower) / np.asarray(grid.voxel_size)
    return np.any((dirs == 0) & (frac == np.round(frac)), axis=1)


def traverse_ray(grid: GridSpec, ray: Ray) -> List[int]:
    """Voxels crossed by ``ray`` in traversal order (incremental 3D DDA)."""
    o, d = ray.origin, ray.direction
    t_start, t_end = _slab_interval(grid, o[None, :], d[None, :])
    t_start, t_end = float(t_start[0]), float(t_end[0])
    eps = SEGMENT_EPS * min(grid.voxel_size)
    if not t_end - t_start > eps or _in_grid_plane(grid, o[None, :], d[None, :])[0]:
        return []

    lo = grid.lower
    size = np.asarray(grid.voxel_size)
    dims = grid.dims
    entry = o + t_start * d
    idx = [0, 0, 0]
    step = [0, 0, 0]
    t_max = [math.inf] * 3
    t_delta = [math.inf] * 3
    for a in range(3):
        x = (entry[a] - lo[a]) / size[a]
        i = math.ceil(x) - 1 if d[a] < 0 else math.floor(x)
        idx[a] = min(max(i, 0), dims[a] - 1)
        if d[a] > 0:
            step[a] = 1
            t_max[a] = (lo[a] + (idx[a] + 1) * size[a] - o[a]) / d[a]
            t_delta[a] = size[a] / d[a]
        elif d[a] < 0:
            step[a] = -1
            t_max[a] = (lo[a] + idx[a] * size[a] - o[a]) / d[a]
            t_delta[a] = -size[a] / d[a]

    voxels = []
    t = t_start
    while True:
        a = min(range(3), key=lambda axis: t_max[axis])
        t_next = min(t_max[a], t_end)
        if t_next - t > eps:
            voxels.append(int(grid.flat_index(*idx)))
        t = max(t, t_next)
        if t >= t_end:
            break
        idx[a] += step[a]
        if not 0 <= idx[a] < dims[a]:
            break
        t_max[a] += t_delta[a]
    return voxels


def traverse_rays(grid: GridSpec, origins: np.ndarray, dirs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Batch traversal by sorted plane crossings.

    Returns (ray index, flat voxel index) pairs ordered by ray, then by
    distance along the ray.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    lo = grid.lower
    size = np.asarray(grid.voxel_size)
    dims = np.asarray(grid.dims)
    eps = SEGMENT_EPS * float(size.min())
    planes = [lo[a] + size[a] * np.arange(dims[a] + 1) for a in range(3)]

    ray_parts, vox_parts = [], []
    for begin, end in chunk_ranges(len(origins), RAYS_PER_CHUNK):
        o, d = origins[begin:end], dirs[begin:end]
        t0, t1 = _slab_interval(grid, o, d)
        hit = (t1 - t0 > eps) & ~_in_grid_plane(grid, o, d)
        if not np.any(hit):
            continue
        rows = np.nonzero(hit)[0]
        o, d, t0, t1 = o[rows], d[rows], t0[rows], t1[rows]
        columns = [t0[:, None], t1[:, None]]
        with np.errstate(divide="ignore", invalid="ignore"):
            for a in range(3):
                ta = (planes[a][None, :] - o[:, a:a + 1]) / d[:, a:a + 1]
                ta = np.where((ta > t0[:, None]) & (ta < t1[:, None]), ta, np.inf)
                columns.append(ta)
        alphas = np.sort(np.concatenate(columns, axis=1), axis=1)
        seg_lo, seg_hi = alphas[:, :-1], alphas[:, 1:]
        with np.errstate(invalid="ignore"):
            valid = np.isfinite(seg_hi) & (seg_hi - seg_lo > eps)
        r_loc, s_loc = np.nonzero(valid)
        mid = 0.5 * (seg_lo[r_loc, s_loc] + seg_hi[r_loc, s_loc])
        pts = o[r_loc] + mid[:, None] * d[r_loc]
        ijk = np.floor((pts - lo) / size).astype(np.int64)
        ijk = np.clip(ijk, 0, dims - 1)
        ray_parts.append(rows[r_loc] + begin)
        vox_parts.append(grid.flat_index(ijk[:, 0], ijk[:, 1], ijk[:, 2]))
    if not ray_parts:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(ray_parts), np.concatenate(vox_parts).astype(np.int64)


@dataclasses.dataclass(eq=False)
class CountVolume:
    grid: GridSpec
    counts: np.ndarray
    num_projections: int
    saturated: bool = True
    view_incidences: Optional[List[int]] = None

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.uint32).reshape(self.grid.shape)

    @property
    def flat(self) -> np.ndarray:
        return self.counts.ravel()

    @property
    def num_slices(self) -> int:
        return self.grid.dims[2]

    def header(self) -> dict:
        payload = self.grid.to_dict()
        payload.update(
            {
                "num_projections": self.num_projections,
                "saturated": self.saturated,
                "dtype": "uint32",
                "byte_order": "little",
                "order": "x-fastest",
            }
        )
        return payload

    def save(self, raw_path: Union[str, Path], header_path: Union[str, Path]) -> None:
        write_raw(raw_path, self.counts, "u4")
        write_json(header_path, self.header())

    @classmethod
    def load(cls, raw_path: Union[str, Path], header_path: Union[str, Path]) -> "CountVolume":
        header = read_json(header_path)
        try:
            grid = GridSpec.from_dict(header)
            k = int(header["num_projections"])
            saturated = bool(header["saturated"])
        except KeyError as e:
            raise ParseError(f"count header is missing key {e.args[0]!r}") from e
        counts = read_raw(raw_path, "u4", grid.num_voxels)
        return cls(grid=grid, counts=counts.reshape(grid.shape), num_projections=k, saturated=saturated)


def _check_inputs(edge_maps: Sequence, geom: AcquisitionGeometry) -> None:
    if len(edge_maps) != geom.num_projections:
        raise StageMismatchError("edge_maps.count", geom.num_projections, len(edge_maps))
    for k, m in enumerate(edge_maps):
        if tuple(m.dims) != (geom.nu, geom.nv):
            raise StageMismatchError(f"edge_maps[{k}].dims", (geom.nu, geom.nv), tuple(m.dims))


def backproject_edge_maps(
    edge_maps: Sequence,
    geom: AcquisitionGeometry,
    grid: GridSpec,
    saturate: bool = True,
    workers: int = 1,
    progress: bool = False,
) -> CountVolume:
    _check_inputs(edge_maps, geom)

    def view(k):
        u, v = edge_maps[k].edge_pixels()
        if u.size == 0:
            return np.zeros(0, dtype=np.int64), 0
        origins, dirs = geom.pixel_rays(k, u, v)
        _, voxels = traverse_rays(grid, origins, dirs)
        return voxels, int(voxels.size)

    results = parallel_map(view, range(geom.num_projections), workers=workers, desc="backproject", progress=progress)
    counts = np.zeros(grid.num_voxels, dtype=np.uint32)
    incidences = []
    for voxels, n_inc in results:
        incidences.append(n_inc)
        if voxels.size == 0:
            continue
        if saturate:
            counts[np.unique(voxels)] += np.uint32(1)
        else:
            ids, hits = np.unique(voxels, return_counts=True)
            counts[ids] += hits.astype(np.uint32)
    volume = CountVolume(
        grid=grid,
        counts=counts.reshape(grid.shape),
        num_projections=geom.num_projections,
        saturated=saturate,
        view_incidences=incidences,
    )
    logger.info(
        f"Backprojected {geom.num_projections} edge maps into {grid.dims} grid "
        f"({'saturated' if saturate else 'unsaturated'}): {int((counts > 0).sum())} non-null voxels, "
        f"max count {int(counts.max())}"
    )
    return volume


# one axis per opposite-neighbour pair of the 26-neighbourhood, as (dx, dy, dz)
RIDGE_AXES = np.array(
    [
        (1, 0, 0), (0, 1, 0), (0, 0, 1),
        (1, 1, 0), (1, -1, 0), (1, 0, 1), (1, 0, -1), (0, 1, 1), (0, 1, -1),
        (1, 1, 1), (1, 1, -1), (1, -1, 1), (1, -1, -1),
    ],
    dtype=np.int64,
)


def count_gradient_axes(counts: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Sobel gradient of a (nz, ny, nx) count array snapped to ``RIDGE_AXES``.

    Returns the axis index per voxel and a mask of voxels with zero gradient.
    """
    values = np.asarray(counts, dtype=np.float64)
    # ndimage axes are (z, y, x)
    grad = [ndimage.sobel(values, axis=a, mode="constant") for a in (2, 1, 0)]
    flat = (grad[0] == 0) & (grad[1] == 0) & (grad[2] == 0)
    units = RIDGE_AXES / np.linalg.norm(RIDGE_AXES, axis=1, keepdims=True)
    best = np.zeros(values.shape, dtype=np.int8)
    best_score = np.full(values.shape, -1.0)
    for i, (ux, uy, uz) in enumerate(units):
        score = np.abs(grad[0] * ux + grad[1] * uy + grad[2] * uz)
        better = score > best_score
        best[better] = i
        best_score[better] = score[better]
    return best, flat


def suppress_non_maxima(volume: CountVolume) -> CountVolume:
    """Thin the count shells to their crest.

    A non-null voxel survives when its count is strictly above the backward
    neighbour and not below the forward neighbour along its gradient axis,
    or when its gradient vanishes. Suppressed voxels drop to 0; survivors
    keep their count.
    """
    counts = volume.counts
    axes, flat = count_gradient_axes(counts)
    nz, ny, nx = counts.shape
    padded = np.pad(counts, 1, mode="constant", constant_values=0)
    crest = flat.copy()
    for i, (dx, dy, dz) in enumerate(RIDGE_AXES):
        forward = padded[1 + dz:1 + dz + nz, 1 + dy:1 + dy + ny, 1 + dx:1 + dx + nx]
        backward = padded[1 - dz:1 - dz + nz, 1 - dy:1 - dy + ny, 1 - dx:1 - dx + nx]
        crest |= (axes == i) & (counts > backward) & (counts >= forward)
    keep = crest & (counts > 0)
    thinned = np.where(keep, counts, 0).astype(np.uint32)
    logger.info(
        f"Ridge thinning kept {int(keep.sum())} of {int(np.count_nonzero(counts))} non-null voxels"
    )
    return CountVolume(
        grid=volume.grid,
        counts=thinned,
        num_projections=volume.num_projections,
        saturated=volume.saturated,
        view_incidences=volume.view_incidences,
    )
