"""
3D Delaunay tetrahedralization of a point cloud.

The incremental builder is Bowyer-Watson over a triangulation closed by a
symbolic vertex at infinity: every hull face carries an infinite tetrahedron,
so points outside the current hull are inserted by the same cavity carving as
interior ones and the result covers the convex hull exactly. Points are
inserted in a seeded random order and located by a visibility walk. Conflict
tests use the exact predicates with symbolic perturbation on the
lexicographic rank of each point, making the tet set independent of the
insertion order.

Finite tetrahedra are positively oriented. ``neighbors[t, i]`` is the tet
across the face opposite vertex slot ``i`` (``HULL`` on the boundary).
"""

import dataclasses
import logging
import math
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.spatial import Delaunay, QhullError
from tqdm import tqdm

from src.constants import SLIVER_VOLUME_FACTOR
from src.exceptions import ConfigurationError, DegeneracyError, DimensionalityError, MeshIntegrityError
from src.point_cloud import PointCloud
from src.predicates import in_circle_perturbed, in_sphere_perturbed, orient3d

logger = logging.getLogger(__name__)

INFINITE = -1
HULL = -1

# vertex slots of the face opposite slot i, ordered so that vertex i is on its positive side
FACE_SLOTS = ((1, 3, 2), (0, 2, 3), (0, 3, 1), (0, 1, 2))
_FACE_SLOTS_ARRAY = np.array(FACE_SLOTS, dtype=np.int64)


@dataclasses.dataclass(eq=False)
class TetMesh:
    vertices: np.ndarray
    tets: np.ndarray
    neighbors: Optional[np.ndarray] = None
    dropped_slivers: int = 0

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.tets = np.asarray(self.tets, dtype=np.int64).reshape(-1, 4)
        if self.tets.size and (self.tets.min() < 0 or self.tets.max() >= len(self.vertices)):
            raise MeshIntegrityError("tetrahedron references a vertex outside the vertex list")
        if self.neighbors is None:
            self.neighbors = build_adjacency(self.tets)
        else:
            self.neighbors = np.asarray(self.neighbors, dtype=np.int64).reshape(-1, 4)

    @property
    def num_cells(self) -> int:
        return len(self.tets)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    def corners(self) -> np.ndarray:
        """(m, 4, 3) vertex coordinates per tet."""
        return self.vertices[self.tets]

    def signed_volumes(self) -> np.ndarray:
        return signed_volumes(self.vertices, self.tets)

    def total_volume(self) -> float:
        return math.fsum(self.signed_volumes().tolist())

    def centroids(self) -> np.ndarray:
        return self.corners().mean(axis=1)

    def circumspheres(self) -> Tuple[np.ndarray, np.ndarray]:
        """(centers, radii) for all tets, vectorized."""
        p = self.corners()
        a = p[:, 0]
        m = p[:, 1:] - a[:, None, :]
        rhs = 0.5 * np.einsum("mij,mij->mi", m, m)
        centers = a + np.linalg.solve(m, rhs[..., None])[..., 0]
        radii = np.linalg.norm(centers - a, axis=1)
        return centers, radii

    def boundary_faces(self) -> Tuple[np.ndarray, np.ndarray]:
        """(tet, slot) pairs of faces without a neighbour."""
        return np.nonzero(self.neighbors < 0)

    def face_vertices(self, tet: int, slot: int) -> np.ndarray:
        return self.tets[tet, list(FACE_SLOTS[slot])]

    def tet_set(self) -> List[Tuple[int, int, int, int]]:
        return sorted(tuple(sorted(int(v) for v in t)) for t in self.tets)

    def validate(self) -> None:
        """Raise MeshIntegrityError on non-positive tets or asymmetric adjacency."""
        vol = self.signed_volumes()
        if np.any(vol <= 0):
            raise MeshIntegrityError(f"{int((vol <= 0).sum())} tetrahedra are not positively oriented")
        t, i = np.nonzero(self.neighbors >= 0)
        n = self.neighbors[t, i]
        back = (self.neighbors[n] == t[:, None]).sum(axis=1)
        if np.any(back != 1):
            raise MeshIntegrityError("face adjacency is not symmetric")


def signed_volumes(vertices: np.ndarray, tets: np.ndarray) -> np.ndarray:
    p = np.asarray(vertices)[np.asarray(tets)]
    return np.linalg.det(p[:, 1:] - p[:, :1]) / 6.0


def build_adjacency(tets: np.ndarray) -> np.ndarray:
    """Match shared faces; each face may be shared by at most two tets."""
    tets = np.asarray(tets, dtype=np.int64).reshape(-1, 4)
    m = len(tets)
    neighbors = np.full((m, 4), HULL, dtype=np.int64)
    if m == 0:
        return neighbors
    faces = np.sort(tets[:, _FACE_SLOTS_ARRAY].reshape(-1, 3), axis=1)
    order = np.lexsort((faces[:, 2], faces[:, 1], faces[:, 0]))
    sorted_faces = faces[order]
    same = np.all(sorted_faces[1:] == sorted_faces[:-1], axis=1)
    if np.any(same[1:] & same[:-1]):
        raise MeshIntegrityError("a face is shared by more than two tetrahedra")
    first = order[:-1][same]
    second = order[1:][same]
    neighbors.reshape(-1)[first] = second // 4
    neighbors.reshape(-1)[second] = first // 4
    return neighbors


def orient_positive(vertices: np.ndarray, tets: np.ndarray) -> np.ndarray:
    tets = np.array(tets, dtype=np.int64).reshape(-1, 4)
    flip = signed_volumes(vertices, tets) < 0
    tets[flip] = tets[flip][:, [0, 1, 3, 2]]
    return tets


def circumsphere(a, b, c, d) -> Tuple[np.ndarray, float]:
    pts = [tuple(float(x) for x in p) for p in (a, b, c, d)]
    if orient3d(*pts) == 0:
        raise DegeneracyError("circumsphere of a flat tetrahedron")
    a = np.asarray(pts[0])
    m = np.asarray(pts[1:]) - a
    center = a + np.linalg.solve(m, 0.5 * np.einsum("ij,ij->i", m, m))
    return center, float(np.linalg.norm(center - a))


@dataclasses.dataclass(frozen=True)
class MeshStats:
    cell_count: int
    vertex_count: int
    total_volume: float
    min_dihedral_deg: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def dihedral_angles(mesh: TetMesh) -> np.ndarray:
    """(m, 6) interior dihedral angles in degrees."""
    p = mesh.corners()
    normals = []
    for a, b, c in FACE_SLOTS:
        n = np.cross(p[:, b] - p[:, a], p[:, c] - p[:, a])
        normals.append(-n / np.linalg.norm(n, axis=1, keepdims=True))
    angles = []
    for k in range(4):
        for l in range(k + 1, 4):
            cos = -np.einsum("ij,ij->i", normals[k], normals[l])
            angles.append(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))
    return np.stack(angles, axis=1)


def mesh_stats(mesh: TetMesh) -> MeshStats:
    min_dihedral = float(dihedral_angles(mesh).min()) if mesh.num_cells else float("nan")
    return MeshStats(
        cell_count=mesh.num_cells,
        vertex_count=mesh.num_vertices,
        total_volume=mesh.total_volume(),
        min_dihedral_deg=min_dihedral,
    )


# Incremental construction

class _Triangulation:
    """Mutable Bowyer-Watson state; tets are 4-lists that may hold INFINITE."""

    def __init__(self, points: List[Tuple[float, float, float]], ranks: List[int]):
        self.p = points
        self.rank = ranks
        self.tv: List[List[int]] = []
        self.tn: List[List[int]] = []
        self.alive: List[bool] = []
        self.free: List[int] = []
        self.hint = 0
        self.walk_steps = 0

    def _alloc(self, verts: List[int]) -> int:
        if self.free:
            t = self.free.pop()
            self.tv[t] = verts
            self.tn[t] = [HULL] * 4
            self.alive[t] = True
            return t
        self.tv.append(verts)
        self.tn.append([HULL] * 4)
        self.alive.append(True)
        return len(self.tv) - 1

    def _glue(self, new_tets: List[int], apex: int) -> None:
        """Connect the faces incident to ``apex`` among freshly created tets."""
        open_faces = {}
        for t in new_tets:
            verts = self.tv[t]
            for slot in range(4):
                if verts[slot] == apex:
                    continue
                key = tuple(sorted(v for k, v in enumerate(verts) if k != slot))
                other = open_faces.pop(key, None)
                if other is None:
                    open_faces[key] = (t, slot)
                else:
                    self.tn[t][slot] = other[0]
                    self.tn[other[0]][other[1]] = t
        if open_faces:
            raise MeshIntegrityError(f"cavity boundary is not closed ({len(open_faces)} open faces)")

    def start(self, a: int, b: int, c: int, d: int) -> None:
        P = self.p
        if orient3d(P[a], P[b], P[c], P[d]) < 0:
            c, d = d, c
        t0 = self._alloc([a, b, c, d])
        hull = []
        for slot in range(4):
            x, y, z = (self.tv[t0][k] for k in FACE_SLOTS[slot])
            t = self._alloc([y, x, z, INFINITE])
            self.tn[t][3] = t0
            self.tn[t0][slot] = t
            hull.append(t)
        self._glue(hull, INFINITE)
        self.hint = t0

    def face(self, t: int, slot: int) -> Tuple[int, int, int]:
        verts = self.tv[t]
        a, b, c = FACE_SLOTS[slot]
        return verts[a], verts[b], verts[c]

    def in_conflict(self, t: int, q: int) -> bool:
        verts = self.tv[t]
        P, R = self.p, self.rank
        if INFINITE in verts:
            a, b, c = self.face(t, verts.index(INFINITE))
            o = orient3d(P[a], P[b], P[c], P[q])
            if o:
                return o > 0
            return in_circle_perturbed(P[a], P[b], P[c], P[q], (R[a], R[b], R[c], R[q])) > 0
        v0, v1, v2, v3 = verts
        return in_sphere_perturbed(P[v0], P[v1], P[v2], P[v3], P[q], (R[v0], R[v1], R[v2], R[v3], R[q])) > 0

    def locate(self, q: int, max_steps: int) -> int:
        P = self.p
        t = self.hint
        if not self.alive[t]:
            t = next(i for i in range(len(self.alive)) if self.alive[i])
        if INFINITE in self.tv[t]:
            t = self.tn[t][self.tv[t].index(INFINITE)]
        for step in range(max_steps):
            self.walk_steps += 1
            moved = False
            for k in range(4):
                slot = (k + step) & 3
                a, b, c = self.face(t, slot)
                if orient3d(P[a], P[b], P[c], P[q]) < 0:
                    t = self.tn[t][slot]
                    moved = True
                    break
            if not moved or INFINITE in self.tv[t]:
                return t
        logger.debug(f"visibility walk exceeded {max_steps} steps, scanning")
        return -1

    def _conflict_seed(self, q: int, located: int) -> int:
        if located >= 0 and self.in_conflict(located, q):
            return located
        if located >= 0:
            for n in self.tn[located]:
                if n >= 0 and self.in_conflict(n, q):
                    return n
        for t, alive in enumerate(self.alive):
            if alive and self.in_conflict(t, q):
                return t
        raise MeshIntegrityError(f"no tetrahedron conflicts with point {q}")

    def insert(self, q: int, max_steps: int) -> None:
        seed = self._conflict_seed(q, self.locate(q, max_steps))
        cavity = {seed}
        outside = set()
        stack = [seed]
        boundary = []
        while stack:
            t = stack.pop()
            for slot in range(4):
                n = self.tn[t][slot]
                if n in cavity:
                    continue
                if n not in outside:
                    if self.in_conflict(n, q):
                        cavity.add(n)
                        stack.append(n)
                        continue
                    outside.add(n)
                boundary.append((t, slot, n))

        created = []
        for t, slot, n in boundary:
            x, y, z = self.face(t, slot)
            new = self._alloc([x, y, z, q])
            self.tn[new][3] = n
            self.tn[n][self.tn[n].index(t)] = new
            created.append(new)
        for t in cavity:
            self.alive[t] = False
            self.free.append(t)
        self._glue(created, q)
        self.hint = next((t for t in created if INFINITE not in self.tv[t]), created[0])

    def finite_tets(self) -> np.ndarray:
        rows = [v for v, alive in zip(self.tv, self.alive) if alive and INFINITE not in v]
        return np.array(rows, dtype=np.int64).reshape(-1, 4)


def _initial_simplex(points: List[Tuple[float, float, float]], order: np.ndarray) -> Tuple[int, int, int, int]:
    pts = np.asarray(points)
    a = int(order[0])
    rest = order[1:]
    b = int(rest[0])
    cross = np.cross(pts[b] - pts[a], pts[rest] - pts[a])
    # exact collinearity check via orient3d against an offset point
    c = None
    for j in np.nonzero(np.any(cross != 0, axis=1))[0]:
        cand = int(rest[j])
        n = cross[j]
        lifted = tuple(pts[a] + n)
        if orient3d(points[a], points[b], points[cand], lifted) != 0:
            c = cand
            break
    if c is None:
        raise DimensionalityError("all points are collinear")
    for j in order:
        d = int(j)
        if d in (a, b, c):
            continue
        if orient3d(points[a], points[b], points[c], points[d]) != 0:
            return a, b, c, d
    raise DimensionalityError("all points are coplanar")


def _drop_slivers(vertices: np.ndarray, tets: np.ndarray) -> Tuple[np.ndarray, int]:
    diag = float(np.linalg.norm(vertices.max(axis=0) - vertices.min(axis=0)))
    eps_v = SLIVER_VOLUME_FACTOR * diag ** 3
    keep = signed_volumes(vertices, tets) > eps_v
    dropped = int((~keep).sum())
    if dropped:
        logger.info(f"Dropped {dropped} degenerate tetrahedra below {eps_v:.3e} mm^3")
    return tets[keep], dropped


def deduplicate(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Unique points in first-occurrence order and their source indices."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise DimensionalityError("point cloud contains non-finite coordinates")
    _, first = np.unique(pts, axis=0, return_index=True)
    keep = np.sort(first)
    if len(keep) < len(pts):
        logger.warning(f"Removed {len(pts) - len(keep)} duplicate points before tetrahedralization")
    return pts[keep], keep


def tetrahedralize(
    cloud: Union[np.ndarray, PointCloud],
    seed: int = 0,
    method: str = "incremental",
    progress: bool = False,
) -> TetMesh:
    points = getattr(cloud, "points", cloud)
    vertices, _ = deduplicate(points)
    n = len(vertices)
    if n < 4:
        raise DimensionalityError(f"tetrahedralization needs at least 4 distinct points, got {n}")

    if method == "qhull":
        tets = _qhull_tets(vertices)
    elif method == "incremental":
        tets = _bowyer_watson(vertices, seed, progress)
    else:
        raise ConfigurationError(f"unknown mesh method {method!r}; choose 'incremental' or 'qhull'")

    tets, dropped = _drop_slivers(vertices, tets)
    mesh = TetMesh(vertices, tets, dropped_slivers=dropped)
    logger.info(f"Delaunay ({method}): {mesh.num_cells} tetrahedra over {n} vertices")
    return mesh


def _bowyer_watson(vertices: np.ndarray, seed: int, progress: bool) -> np.ndarray:
    n = len(vertices)
    points = [tuple(float(c) for c in p) for p in vertices]
    ranks = np.empty(n, dtype=np.int64)
    ranks[np.lexsort((vertices[:, 2], vertices[:, 1], vertices[:, 0]))] = np.arange(n)

    order = np.random.default_rng(seed).permutation(n)
    a, b, c, d = _initial_simplex(points, order)
    tri = _Triangulation(points, ranks.tolist())
    tri.start(a, b, c, d)

    first = {a, b, c, d}
    max_steps = 10 * n + 1000
    for q in tqdm(order, desc="delaunay", disable=not progress, leave=False):
        q = int(q)
        if q in first:
            continue
        tri.insert(q, max_steps)
    logger.debug(f"visibility walk: {tri.walk_steps} steps for {n} insertions")
    return tri.finite_tets()


def _qhull_tets(vertices: np.ndarray) -> np.ndarray:
    try:
        dt = Delaunay(vertices, qhull_options="Qbb Qc Qz Q12 Qt")
    except QhullError as e:
        raise DimensionalityError(f"qhull could not tetrahedralize the cloud: {e}") from e
    return orient_positive(vertices, dt.simplices)
