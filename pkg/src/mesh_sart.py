"""
Mesh-adapted SART.

The projector traces rays through a tetrahedral mesh with piecewise-constant
cell values. A ray is clipped against the convex hull, its entry cell is
located among the cells owning boundary faces, and it then walks from cell to
cell through the face adjacency, emitting one chord per crossed cell. Faces
left open by rejected flat cells are crossed by locating the next cell at the
exit point. The chords of all rays of a view form one sparse system matrix.
"""

import csv
import dataclasses
import logging
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.spatial import ConvexHull, cKDTree

from src.acquisition_geometry import AcquisitionGeometry, Ray
from src.constants import DEFAULT_RELAX
from src.exceptions import ConfigurationError, MeshIntegrityError
from src.phantom_models import ProjectionSet
from src.tetrahedralization import FACE_SLOTS, TetMesh
from src.utils import chunk_ranges, parallel_map

logger = logging.getLogger(__name__)

RAYS_PER_CHUNK = 1024
LOCATE_NEIGHBOURS = 16
RELATIVE_TOL = 1e-9


@dataclasses.dataclass(eq=False)
class CellField:
    mesh: TetMesh
    values: np.ndarray
    untouched: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if len(self.values) != self.mesh.num_cells:
            raise ConfigurationError(f"cell field has {len(self.values)} values for {self.mesh.num_cells} cells")
        if not np.all(np.isfinite(self.values)):
            raise ConfigurationError("cell field contains non-finite values")


@dataclasses.dataclass(eq=False)
class ChordList:
    cells: np.ndarray
    lengths: np.ndarray

    def __len__(self) -> int:
        return len(self.cells)

    @property
    def total_length(self) -> float:
        return float(self.lengths.sum())


class MeshProjector:
    """Ray/tetrahedron chord tracer over one immutable mesh."""

    def __init__(self, mesh: TetMesh):
        if mesh.num_cells == 0:
            raise MeshIntegrityError("cannot project through an empty mesh")
        self.mesh = mesh
        m = mesh.num_cells
        p = mesh.corners()

        # outward unit normals; inside a cell every n . x <= offset
        self.normals = np.empty((m, 4, 3))
        self.offsets = np.empty((m, 4))
        for slot, (a, b, c) in enumerate(FACE_SLOTS):
            n = -np.cross(p[:, b] - p[:, a], p[:, c] - p[:, a])
            n /= np.linalg.norm(n, axis=1, keepdims=True)
            self.normals[:, slot] = n
            self.offsets[:, slot] = np.einsum("ij,ij->i", n, p[:, a])

        self.back_slot = self._back_slots(mesh.neighbors)
        lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
        self.tol = RELATIVE_TOL * float(np.linalg.norm(hi - lo))

        hull = ConvexHull(mesh.vertices)
        self.hull_normals = hull.equations[:, :3]
        self.hull_offsets = -hull.equations[:, 3]

        bt, bs = mesh.boundary_faces()
        self._face_owner = bt
        face_vertices = mesh.tets[bt[:, None], np.asarray(FACE_SLOTS)[bs]]
        self._face_vertices = face_vertices
        corners = mesh.vertices[face_vertices]
        centroids = corners.mean(axis=1)
        self._face_radius = float(np.linalg.norm(corners - centroids[:, None], axis=2).max())
        self._face_tree = cKDTree(centroids)
        self._centroid_tree = cKDTree(mesh.centroids())

        flat = mesh.tets.ravel()
        order = np.argsort(flat, kind="stable")
        self._vertex_tets = order // 4
        self._vertex_ptr = np.searchsorted(flat[order], np.arange(mesh.num_vertices + 1))

    @staticmethod
    def _back_slots(neighbors: np.ndarray) -> np.ndarray:
        m = len(neighbors)
        valid = neighbors >= 0
        across = neighbors[np.where(valid, neighbors, 0)]
        eq = across == np.arange(m)[:, None, None]
        has = eq.any(axis=2) & valid
        back = np.full((m, 4), -1, dtype=np.int64)
        back[has] = eq.argmax(axis=2)[has]
        return back

    def clip_hull(self, origins: np.ndarray, dirs: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(t_in, t_out, hit) of each ray against the convex hull, with t_in >= 0."""
        n = len(origins)
        t_in = np.zeros(n)
        t_out = np.zeros(n)
        for begin, end in chunk_ranges(n, RAYS_PER_CHUNK):
            o, d = origins[begin:end], dirs[begin:end]
            denom = d @ self.hull_normals.T
            num = self.hull_offsets[None, :] - o @ self.hull_normals.T
            with np.errstate(divide="ignore", invalid="ignore"):
                t = num / denom
            enter = np.where(denom < 0, t, -np.inf).max(axis=1)
            leave = np.where(denom > 0, t, np.inf).min(axis=1)
            blocked = ((denom == 0) & (num < 0)).any(axis=1)
            t_in[begin:end] = np.maximum(enter, 0.0)
            t_out[begin:end] = np.where(blocked, -np.inf, leave)
        return t_in, t_out, t_out - t_in > self.tol

    def _cell_intervals(self, cells, origins, dirs) -> Tuple[np.ndarray, np.ndarray]:
        N = self.normals[cells]
        denom = np.einsum("pij,pj->pi", N, dirs)
        num = self.offsets[cells] - np.einsum("pij,pj->pi", N, origins)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / denom
        t_in = np.where(denom < 0, t, -np.inf).max(axis=1)
        t_out = np.where(denom > 0, t, np.inf).min(axis=1)
        blocked = ((denom == 0) & (num < 0)).any(axis=1)
        return t_in, np.where(blocked, -np.inf, t_out)

    def _pick(self, ray_of, cells, origins, dirs, t, exclude) -> np.ndarray:
        """Per ray, the candidate cell the ray occupies just after ``t`` the longest."""
        best = np.full(len(t), -1, dtype=np.int64)
        if cells.size == 0:
            return best
        key = np.unique(ray_of * self.mesh.num_cells + cells)
        ray_of, cells = key // self.mesh.num_cells, key % self.mesh.num_cells
        t_in, t_out = self._cell_intervals(cells, origins[ray_of], dirs[ray_of])
        t_ref = t[ray_of] + self.tol
        ok = (t_in <= t_ref) & (t_out > t_ref) & (cells != exclude[ray_of])
        if not ok.any():
            return best
        ray_of, cells, score = ray_of[ok], cells[ok], t_out[ok]
        order = np.lexsort((-score, ray_of))
        ray_of, cells = ray_of[order], cells[order]
        first = np.r_[True, ray_of[1:] != ray_of[:-1]]
        best[ray_of[first]] = cells[first]
        return best

    def locate(self, origins: np.ndarray, dirs: np.ndarray, t: np.ndarray,
               exclude: Optional[np.ndarray] = None) -> np.ndarray:
        """Cell entered by each ray at parameter ``t`` (-1 when none)."""
        origins = np.atleast_2d(origins)
        dirs = np.atleast_2d(dirs)
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        exclude = np.full(len(t), -1, dtype=np.int64) if exclude is None else np.asarray(exclude, dtype=np.int64)
        x = origins + t[:, None] * dirs

        lists = self._face_tree.query_ball_point(x, r=self._face_radius + self.tol)
        sizes = np.fromiter((len(l) for l in lists), dtype=np.int64, count=len(lists))
        faces = np.fromiter((f for l in lists for f in l), dtype=np.int64, count=int(sizes.sum()))
        ray_of = np.repeat(np.arange(len(t)), sizes)
        k = min(LOCATE_NEIGHBOURS, self.mesh.num_cells)
        _, near = self._centroid_tree.query(x, k=k)
        near = np.asarray(near, dtype=np.int64).reshape(len(t), k)
        cand_ray = np.concatenate([ray_of, np.repeat(np.arange(len(t)), k)])
        cand_cell = np.concatenate([self._face_owner[faces], near.ravel()])
        best = self._pick(cand_ray, cand_cell, origins, dirs, t, exclude)

        missing = np.nonzero(best < 0)[0]
        if missing.size:
            # widen to every cell sharing a vertex with a nearby boundary face
            sel = np.isin(ray_of, missing)
            verts = self._face_vertices[faces[sel]].ravel()
            v_ray = np.repeat(ray_of[sel], 3)
            counts = self._vertex_ptr[verts + 1] - self._vertex_ptr[verts]
            starts = np.repeat(self._vertex_ptr[verts], counts)
            offsets = np.arange(int(counts.sum())) - np.repeat(np.cumsum(counts) - counts, counts)
            wide = self._pick(np.repeat(v_ray, counts), self._vertex_tets[starts + offsets], origins, dirs, t, exclude)
            best[missing] = wide[missing]
        return best

    def trace(self, origins: np.ndarray, dirs: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(ray index, cell, chord length) triplets, grouped by ray in walk order."""
        origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
        dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
        t_in, t_out, hit = self.clip_hull(origins, dirs)
        rays = np.nonzero(hit)[0]
        empty = (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0))
        if rays.size == 0:
            return empty
        cells = self.locate(origins[rays], dirs[rays], t_in[rays])
        if np.any(cells < 0):
            logger.debug(f"{int((cells < 0).sum())} rays grazing the hull were not located")
        r, c = rays[cells >= 0], cells[cells >= 0]
        t_cur, t_end = t_in[r], t_out[r]

        neighbors = self.mesh.neighbors
        out_r: List[np.ndarray] = []
        out_c: List[np.ndarray] = []
        out_l: List[np.ndarray] = []
        max_steps = 4 * self.mesh.num_cells + 64
        steps = 0
        while r.size:
            steps += 1
            if steps > max_steps:
                raise MeshIntegrityError(f"ray walk exceeded {max_steps} steps; mesh adjacency is inconsistent")
            o, d = origins[r], dirs[r]
            N = self.normals[c]
            denom = np.einsum("pij,pj->pi", N, d)
            num = self.offsets[c] - np.einsum("pij,pj->pi", N, o)
            with np.errstate(divide="ignore", invalid="ignore"):
                tf = np.where(denom > 0, num / denom, np.inf)
            face = tf.argmin(axis=1)
            t_exit = tf[np.arange(len(r)), face]
            if not np.all(np.isfinite(t_exit)):
                raise MeshIntegrityError("ray found no exit face in a bounded cell")
            t_exit = np.maximum(t_exit, t_cur)
            length = t_exit - t_cur
            emit = length > 0
            out_r.append(r[emit])
            out_c.append(c[emit])
            out_l.append(length[emit])

            nxt = neighbors[c, face]
            inner = nxt >= 0
            if np.any(self.back_slot[c[inner], face[inner]] < 0):
                bad = c[inner][self.back_slot[c[inner], face[inner]] < 0][0]
                raise MeshIntegrityError(f"cell {bad}: neighbour does not point back across the shared face")
            open_face = ~inner & (t_exit < t_end - self.tol)
            if open_face.any():
                nxt[open_face] = self.locate(o[open_face], d[open_face], t_exit[open_face], exclude=c[open_face])
            keep = nxt >= 0
            r, c, t_cur, t_end = r[keep], nxt[keep], t_exit[keep], t_end[keep]

        ray_idx = np.concatenate(out_r)
        order = np.argsort(ray_idx, kind="stable")
        return ray_idx[order], np.concatenate(out_c)[order], np.concatenate(out_l)[order]

    def ray_chords(self, ray: Ray) -> ChordList:
        _, cells, lengths = self.trace(ray.origin[None, :], ray.direction[None, :])
        return ChordList(cells, lengths)

    def system_matrix(self, origins: np.ndarray, dirs: np.ndarray) -> sparse.csr_matrix:
        rows, cols, vals = self.trace(origins, dirs)
        return sparse.csr_matrix((vals, (rows, cols)), shape=(len(origins), self.mesh.num_cells))


def ray_chords(mesh: TetMesh, ray: Ray) -> ChordList:
    return MeshProjector(mesh).ray_chords(ray)


def detector_samples(geom: AcquisitionGeometry, ray_stride: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """(u, v) pixel indices used with a stride, row-major."""
    if ray_stride < 1:
        raise ConfigurationError(f"recon.ray_stride must be >= 1, got {ray_stride}")
    s = int(ray_stride)
    vv, uu = np.meshgrid(np.arange(s // 2, geom.nv, s), np.arange(s // 2, geom.nu, s), indexing="ij")
    return uu.ravel(), vv.ravel()


def view_matrices(projector: MeshProjector, geom: AcquisitionGeometry, ray_stride: int = 1,
                  workers: int = 1, progress: bool = False) -> List[sparse.csr_matrix]:
    u, v = detector_samples(geom, ray_stride)

    def build(k):
        origins, dirs = geom.pixel_rays(k, u, v)
        return projector.system_matrix(origins, dirs)

    return parallel_map(build, range(geom.num_projections), workers=workers, desc="system matrix", progress=progress)


def forward_project(field: CellField, geom: AcquisitionGeometry, workers: int = 1,
                    projector: Optional[MeshProjector] = None) -> ProjectionSet:
    projector = projector or MeshProjector(field.mesh)
    mats = view_matrices(projector, geom, 1, workers=workers)
    images = np.stack([(A @ field.values).reshape(geom.nv, geom.nu) for A in mats])
    return ProjectionSet(geometry=geom, images=images)


@dataclasses.dataclass(eq=False)
class SartResult:
    field: CellField
    residuals: List[float]
    relax: float
    sweeps: int

    @property
    def relative_residuals(self) -> List[float]:
        first = self.residuals[0] if self.residuals else 0.0
        return [r / first if first > 0 else 0.0 for r in self.residuals]


def _residual_ss(mats, data, x) -> float:
    return float(sum(np.dot(p - A @ x, p - A @ x) for A, p in zip(mats, data)))


def sart_reconstruct(
    mesh: TetMesh,
    data: ProjectionSet,
    relax: float = DEFAULT_RELAX,
    sweeps: int = 20,
    init: float = 0.0,
    nonnegative: bool = True,
    ray_stride: int = 1,
    workers: int = 1,
    progress: bool = False,
    projector: Optional[MeshProjector] = None,
) -> SartResult:
    """One sub-iteration per view in cyclic order; sum-of-squares residual recorded after every sweep."""
    if not 0.0 < relax < 2.0:
        raise ConfigurationError(f"recon.relax must be in (0, 2), got {relax}")
    if sweeps < 0:
        raise ConfigurationError(f"recon.sweeps must be >= 0, got {sweeps}")
    geom = data.geometry
    projector = projector or MeshProjector(mesh)
    mats = view_matrices(projector, geom, ray_stride, workers=workers, progress=progress)
    u, v = detector_samples(geom, ray_stride)
    measured = [data.images[k][v, u] for k in range(geom.num_projections)]

    row_sums = [np.asarray(A.sum(axis=1)).ravel() for A in mats]
    col_sums = [np.asarray(A.sum(axis=0)).ravel() for A in mats]
    touched = np.zeros(mesh.num_cells, dtype=bool)
    for col in col_sums:
        touched |= col > 0

    x = np.full(mesh.num_cells, float(init))
    residuals = [_residual_ss(mats, measured, x)]
    logger.info(
        f"SART: {mesh.num_cells} cells ({int((~touched).sum())} untouched), {geom.num_projections} views, "
        f"{len(u)} rays per view, relax={relax}, sweeps={sweeps}"
    )
    for sweep in range(sweeps):
        for A, p, row, col in zip(mats, measured, row_sums, col_sums):
            r = p - A @ x
            ratio = np.divide(r, row, out=np.zeros_like(r), where=row > 0)
            back = A.T @ ratio
            upd = col > 0
            x[upd] += relax * back[upd] / col[upd]
            if nonnegative:
                np.maximum(x, 0.0, out=x)
        residuals.append(_residual_ss(mats, measured, x))
        logger.debug(f"SART sweep {sweep + 1}: residual {residuals[-1]:.6g}")
    if residuals[0] > 0:
        logger.info(f"SART residual reduced to {residuals[-1] / residuals[0]:.2%} of its initial value")
    field = CellField(mesh, x, untouched=~touched)
    return SartResult(field=field, residuals=residuals, relax=relax, sweeps=sweeps)


def write_residuals_csv(path: Union[str, Path], result: SartResult) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["sweep", "residual_ss", "relative"])
        for i, (res, rel) in enumerate(zip(result.residuals, result.relative_residuals)):
            writer.writerow([i, repr(res), repr(rel)])
    return path
