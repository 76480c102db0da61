"""
Triangle-mesh phantoms: STL input/output, welding, watertightness, exact
point-to-triangle distances through a bounding-volume hierarchy and
inside-lengths of rays from sorted intersection parities.
"""

import dataclasses
import heapq
import logging
import re
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from src.exceptions import GeometryIntegrityError, ParseError
from src.utils import chunk_ranges, parallel_map

logger = logging.getLogger(__name__)

STL_HEADER_BYTES = 80
STL_RECORD_BYTES = 50
STL_RECORD_DTYPE = np.dtype(
    [("normal", "<f4", (3,)), ("vertices", "<f4", (3, 3)), ("attribute", "<u2")]
)
RAY_CHUNK_PAIRS = 500_000
PARITY_RETRY_ANGLE = 1e-7


@dataclasses.dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    watertight: bool = True
    name: str = ""

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self._bvh: Optional["TriangleBVH"] = None

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    @property
    def num_triangles(self) -> int:
        return int(self.faces.shape[0])

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @property
    def bvh(self) -> "TriangleBVH":
        if self._bvh is None:
            self._bvh = TriangleBVH(self.triangles)
        return self._bvh

    def surface_distances(self, points, workers: int = 1) -> np.ndarray:
        return self.bvh.distances(points, workers=workers)

    def inside_lengths(self, origins, directions) -> np.ndarray:
        return ray_inside_lengths(self.triangles, origins, directions)

    def contains(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        # odd number of crossings along a fixed generic direction
        d = np.array([0.5773502691896258, 0.5773502691896257, 0.5773502691896259])
        d /= np.linalg.norm(d)
        origins = pts
        crossings = _crossing_counts(self.triangles, origins, np.broadcast_to(d, pts.shape))
        return crossings % 2 == 1


# Welding and topology

def weld_triangles(triangles: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Merge vertices with exactly equal coordinates."""
    corners = np.asarray(triangles, dtype=np.float64).reshape(-1, 3)
    vertices, inverse = np.unique(corners, axis=0, return_inverse=True)
    return vertices, inverse.reshape(-1, 3).astype(np.int64)


def edge_use_counts(faces: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    return np.unique(edges, axis=0, return_counts=True)


def is_watertight(faces: np.ndarray) -> bool:
    if len(faces) == 0:
        return False
    _, counts = edge_use_counts(faces)
    return bool(np.all(counts == 2))


# STL parsing

def _parse_binary(data: bytes) -> np.ndarray:
    if len(data) < STL_HEADER_BYTES + 4:
        raise ParseError("binary STL header truncated", offset=len(data))
    count = int(np.frombuffer(data, dtype="<u4", count=1, offset=STL_HEADER_BYTES)[0])
    body = STL_HEADER_BYTES + 4
    available = (len(data) - body) // STL_RECORD_BYTES
    if available < count:
        missing_offset = body + available * STL_RECORD_BYTES
        raise ParseError(
            f"binary STL declares {count} triangles but record {available} is missing",
            offset=missing_offset,
        )
    records = np.frombuffer(data, dtype=STL_RECORD_DTYPE, count=count, offset=body)
    return records["vertices"].astype(np.float64)


_FLOAT_RE = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_VERTEX_RE = re.compile(rb"vertex\s+(" + _FLOAT_RE.encode() + rb")\s+(" + _FLOAT_RE.encode() + rb")\s+(" + _FLOAT_RE.encode() + rb")", re.IGNORECASE)


def _parse_ascii(data: bytes) -> np.ndarray:
    coords: List[Tuple[float, float, float]] = []
    offset = 0
    facet_open = False
    facet_vertices = 0
    for line in data.splitlines(keepends=True):
        stripped = line.strip()
        token = stripped.split(None, 1)[0].lower() if stripped else b""
        if token == b"facet":
            if facet_open:
                raise ParseError("facet opened twice without endfacet", offset=offset)
            facet_open, facet_vertices = True, 0
        elif token == b"vertex":
            match = _VERTEX_RE.match(stripped)
            if match is None or not facet_open:
                raise ParseError("malformed vertex record", offset=offset)
            coords.append(tuple(float(g) for g in match.groups()))
            facet_vertices += 1
        elif token == b"endfacet":
            if not facet_open or facet_vertices != 3:
                raise ParseError(f"facet with {facet_vertices} vertices", offset=offset)
            facet_open = False
        elif token in (b"solid", b"endsolid", b"outer", b"endloop", b""):
            pass
        else:
            raise ParseError(f"unexpected token {token[:20]!r}", offset=offset)
        offset += len(line)
    if facet_open:
        raise ParseError("unterminated facet", offset=offset)
    return np.asarray(coords, dtype=np.float64).reshape(-1, 3, 3)


def _looks_ascii(data: bytes) -> bool:
    if not data.lstrip()[:5].lower() == b"solid":
        return False
    if len(data) >= STL_HEADER_BYTES + 4:
        count = int(np.frombuffer(data, dtype="<u4", count=1, offset=STL_HEADER_BYTES)[0])
        if STL_HEADER_BYTES + 4 + count * STL_RECORD_BYTES == len(data):
            return False
    return b"facet" in data[:4096] or b"endsolid" in data


def parse_stl_bytes(data: bytes, name: str = "") -> TriangleMesh:
    triangles = _parse_ascii(data) if _looks_ascii(data) else _parse_binary(data)
    if len(triangles) == 0:
        raise ParseError("STL contains no triangles", offset=len(data))
    vertices, faces = weld_triangles(triangles)
    watertight = is_watertight(faces)
    if not watertight:
        logger.warning(f"STL mesh {name or '<bytes>'} is not watertight; projection will be refused")
    logger.info(f"Loaded STL {name}: {len(faces)} triangles, {len(vertices)} welded vertices")
    return TriangleMesh(vertices=vertices, faces=faces, watertight=watertight, name=name)


def load_stl(path: Union[str, Path]) -> TriangleMesh:
    path = Path(path)
    return parse_stl_bytes(path.read_bytes(), name=path.name)


def save_stl(path: Union[str, Path], mesh: TriangleMesh, binary: bool = True) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tris = mesh.triangles
    normals = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = np.divide(normals, lengths, out=np.zeros_like(normals), where=lengths > 0)
    if binary:
        records = np.zeros(len(tris), dtype=STL_RECORD_DTYPE)
        records["normal"] = normals
        records["vertices"] = tris
        header = (mesh.name or "meshseed").encode()[:STL_HEADER_BYTES].ljust(STL_HEADER_BYTES, b" ")
        with open(path, "wb") as f:
            f.write(header)
            f.write(np.uint32(len(tris)).astype("<u4").tobytes())
            f.write(records.tobytes())
    else:
        name = mesh.name or "meshseed"
        lines = [f"solid {name}"]
        for n, tri in zip(normals, tris):
            lines.append(f"  facet normal {n[0]:.9e} {n[1]:.9e} {n[2]:.9e}")
            lines.append("    outer loop")
            for vx in tri:
                lines.append(f"      vertex {vx[0]!r} {vx[1]!r} {vx[2]!r}")
            lines.append("    endloop")
            lines.append("  endfacet")
        lines.append(f"endsolid {name}")
        path.write_text("\n".join(lines) + "\n")
    return path


def icosphere(radius: float = 1.0, subdivisions: int = 5, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Geodesic sphere with 20 * 4**subdivisions triangles."""
    phi = (1.0 + 5.0 ** 0.5) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    for _ in range(subdivisions):
        edges = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
        unique_edges, inverse = np.unique(edges, axis=0, return_inverse=True)
        mids = verts[unique_edges[:, 0]] + verts[unique_edges[:, 1]]
        mids /= np.linalg.norm(mids, axis=1, keepdims=True)
        mid_index = (inverse.reshape(3, -1) + len(verts)).T
        a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
        ab, bc, ca = mid_index[:, 0], mid_index[:, 1], mid_index[:, 2]
        faces = np.concatenate(
            [np.stack(f, axis=1) for f in ((a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca))]
        )
        verts = np.concatenate([verts, mids])
    return TriangleMesh(
        vertices=verts * float(radius) + np.asarray(center, dtype=np.float64),
        faces=faces,
        watertight=True,
        name=f"icosphere-{subdivisions}",
    )


# Point-to-triangle distances

def _dot(x, y):
    return np.einsum("ij,ij->i", x, y)


def closest_points_on_triangles(p, a, b, c) -> np.ndarray:
    """Closest point of each triangle (a, b, c) to the paired point p (Voronoi region walk)."""
    p, a, b, c = (np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in (p, a, b, c))
    ab, ac = b - a, c - a
    ap, bp, cp = p - a, p - b, p - c
    d1, d2 = _dot(ab, ap), _dot(ac, ap)
    d3, d4 = _dot(ab, bp), _dot(ac, bp)
    d5, d6 = _dot(ab, cp), _dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def assign(mask, value):
        mask = mask & ~done
        out[mask] = value[mask]
        done[mask] = True

    def ratio(num, den, mask):
        return np.divide(num, den, out=np.zeros_like(num), where=mask & (den != 0))

    assign((d1 <= 0) & (d2 <= 0), a)
    assign((d3 >= 0) & (d4 <= d3), b)
    m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    assign(m, a + ratio(d1, d1 - d3, m)[:, None] * ab)
    assign((d6 >= 0) & (d5 <= d6), c)
    m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    assign(m, a + ratio(d2, d2 - d6, m)[:, None] * ac)
    m = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    assign(m, b + ratio(d4 - d3, (d4 - d3) + (d5 - d6), m)[:, None] * (c - b))
    rest = ~done
    denom = va + vb + vc
    v = ratio(vb, denom, rest)
    w = ratio(vc, denom, rest)
    assign(rest, a + v[:, None] * ab + w[:, None] * ac)
    return out


class TriangleBVH:
    """Median-split bounding-volume hierarchy over a triangle soup."""

    def __init__(self, triangles: np.ndarray, leaf_size: int = 8):
        tris = np.asarray(triangles, dtype=np.float64).reshape(-1, 3, 3)
        self.leaf_size = max(1, int(leaf_size))
        self.order = np.arange(len(tris))
        lo_list, hi_list, left, right, start, count = [], [], [], [], [], []
        centroids = tris.mean(axis=1)
        tri_lo, tri_hi = tris.min(axis=1), tris.max(axis=1)

        # iterative build; each stack entry is (node id, begin, end)
        def new_node(begin, end):
            idx = self.order[begin:end]
            lo_list.append(tri_lo[idx].min(axis=0))
            hi_list.append(tri_hi[idx].max(axis=0))
            left.append(-1)
            right.append(-1)
            start.append(begin)
            count.append(end - begin)
            return len(lo_list) - 1

        stack = [(new_node(0, len(tris)), 0, len(tris))]
        while stack:
            node, begin, end = stack.pop()
            if end - begin <= self.leaf_size:
                continue
            idx = self.order[begin:end]
            spread = centroids[idx].max(axis=0) - centroids[idx].min(axis=0)
            axis = int(np.argmax(spread))
            sorted_idx = idx[np.argsort(centroids[idx, axis], kind="stable")]
            self.order[begin:end] = sorted_idx
            mid = begin + (end - begin) // 2
            left[node] = new_node(begin, mid)
            right[node] = new_node(mid, end)
            count[node] = 0
            stack.append((left[node], begin, mid))
            stack.append((right[node], mid, end))

        self.lo = np.asarray(lo_list)
        self.hi = np.asarray(hi_list)
        self.left = np.asarray(left)
        self.right = np.asarray(right)
        self.start = np.asarray(start)
        self.count = np.asarray(count)
        ordered = tris[self.order]
        self.a, self.b, self.c = ordered[:, 0].copy(), ordered[:, 1].copy(), ordered[:, 2].copy()

    def _box_distance(self, node: int, p: np.ndarray) -> float:
        gap = np.maximum(np.maximum(self.lo[node] - p, 0.0), p - self.hi[node])
        return float(np.sqrt(gap @ gap))

    def nearest(self, point) -> Tuple[float, int]:
        """Distance to the closest triangle and its index in the input order."""
        p = np.asarray(point, dtype=np.float64).reshape(3)
        best, best_tri = np.inf, -1
        heap = [(self._box_distance(0, p), 0)]
        while heap:
            bound, node = heapq.heappop(heap)
            if bound >= best:
                break
            if self.count[node] > 0:
                s, n = self.start[node], self.count[node]
                q = closest_points_on_triangles(
                    np.broadcast_to(p, (n, 3)), self.a[s:s + n], self.b[s:s + n], self.c[s:s + n]
                )
                d = np.linalg.norm(q - p, axis=1)
                j = int(np.argmin(d))
                if d[j] < best:
                    best, best_tri = float(d[j]), int(self.order[s + j])
                continue
            for child in (self.left[node], self.right[node]):
                heapq.heappush(heap, (self._box_distance(child, p), child))
        return best, best_tri

    def distances(self, points, workers: int = 1) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))

        def run(bounds):
            return np.array([self.nearest(pts[i])[0] for i in range(*bounds)])

        parts = parallel_map(run, chunk_ranges(len(pts), 256), workers=workers)
        return np.concatenate(parts) if parts else np.zeros(0)


# Ray/triangle intersections

def _ray_triangle_hits(tris: np.ndarray, origins: np.ndarray, directions: np.ndarray):
    """Moller-Trumbore over all (ray, triangle) pairs; returns (ray index, t) of hits with t > 0."""
    v0 = tris[:, 0]
    e1 = tris[:, 1] - v0
    e2 = tris[:, 2] - v0
    pvec = np.cross(directions[:, None, :], e2[None, :, :])
    det = np.einsum("tk,rtk->rt", e1, pvec)
    scale = np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1)
    valid = np.abs(det) > 1e-14 * scale[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(valid, 1.0 / det, 0.0)
        tvec = origins[:, None, :] - v0[None, :, :]
        u = np.einsum("rtk,rtk->rt", tvec, pvec) * inv
        qvec = np.cross(tvec, e1[None, :, :])
        v = np.einsum("rk,rtk->rt", directions, qvec) * inv
        t = np.einsum("tk,rtk->rt", e2, qvec) * inv
    hit = valid & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > 0.0)
    ray_idx, tri_idx = np.nonzero(hit)
    return ray_idx, t[ray_idx, tri_idx]


def _lengths_from_hits(ray_idx: np.ndarray, t: np.ndarray, n_rays: int, tol: float):
    """Pair sorted crossings per ray; returns (inside length, crossing count)."""
    if ray_idx.size == 0:
        return np.zeros(n_rays), np.zeros(n_rays, dtype=np.int64)
    order = np.lexsort((t, ray_idx))
    r, t = ray_idx[order], t[order]
    # a crossing through a shared edge or vertex is reported by several triangles
    keep = np.ones(len(r), dtype=bool)
    keep[1:] = ~((r[1:] == r[:-1]) & (t[1:] - t[:-1] <= tol))
    r, t = r[keep], t[keep]
    counts = np.bincount(r, minlength=n_rays)
    starts = np.cumsum(counts) - counts
    rank = np.arange(len(r)) - starts[r]
    sign = np.where(rank % 2 == 0, -1.0, 1.0)
    lengths = np.bincount(r, weights=sign * t, minlength=n_rays)
    return lengths, counts


def _chunked_hits(tris, origins, directions, tol):
    n = len(origins)
    lengths = np.zeros(n)
    counts = np.zeros(n, dtype=np.int64)
    rays_per_chunk = max(1, RAY_CHUNK_PAIRS // max(1, len(tris)))
    for begin, end in chunk_ranges(n, rays_per_chunk):
        r, t = _ray_triangle_hits(tris, origins[begin:end], directions[begin:end])
        lengths[begin:end], counts[begin:end] = _lengths_from_hits(r, t, end - begin, tol)
    return lengths, counts


def _crossing_counts(tris, origins, directions) -> np.ndarray:
    tris = np.asarray(tris, dtype=np.float64)
    scale = float(np.ptp(tris.reshape(-1, 3), axis=0).max()) or 1.0
    _, counts = _chunked_hits(tris, np.asarray(origins, np.float64), np.asarray(directions, np.float64), 1e-12 * scale)
    return counts


def _perturb(directions: np.ndarray) -> np.ndarray:
    c, s = np.cos(PARITY_RETRY_ANGLE), np.sin(PARITY_RETRY_ANGLE)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]) @ np.array(
        [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
    )
    d = directions @ rot.T
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def ray_inside_lengths(tris, origins, directions, triangle_subset=None) -> np.ndarray:
    """Length of each ray inside a closed triangle surface.

    Rays whose crossing count is odd are retried once with a slightly rotated
    direction; a second odd count means the surface is not closed.
    """
    tris = np.asarray(tris, dtype=np.float64).reshape(-1, 3, 3)
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    if triangle_subset is not None:
        tris = tris[triangle_subset]
    if len(tris) == 0:
        return np.zeros(len(origins))
    scale = float(np.ptp(tris.reshape(-1, 3), axis=0).max()) or 1.0
    tol = 1e-12 * scale
    lengths, counts = _chunked_hits(tris, origins, directions, tol)
    odd = np.nonzero(counts % 2 == 1)[0]
    if odd.size:
        retry_len, retry_counts = _chunked_hits(tris, origins[odd], _perturb(directions[odd]), tol)
        still_odd = retry_counts % 2 == 1
        if np.any(still_odd):
            bad = int(odd[np.argmax(still_odd)])
            raise GeometryIntegrityError(
                f"odd number of surface crossings ({int(retry_counts[np.argmax(still_odd)])}) "
                f"along ray {bad}: mesh is not watertight",
            )
        lengths[odd] = retry_len
    return lengths


def view_inside_lengths(mesh: TriangleMesh, geom, k: int, tile: int = 16) -> np.ndarray:
    """Inside-length image (nv, nu) of a closed mesh for one view.

    Triangles are culled per detector tile using their projected bounding box.
    """
    nu, nv = geom.nu, geom.nv
    tris = mesh.triangles
    source = geom.frame(k).source
    depth = (mesh.vertices - source) @ geom.frame(k).normal
    image = np.zeros((nv, nu))
    if np.any(depth <= 0):
        origins, dirs = geom.pixel_rays(k)
        return mesh.inside_lengths(origins, dirs).reshape(nv, nu)
    uv = geom.project_points(k, mesh.vertices)[mesh.faces]
    u_lo, u_hi = uv[:, :, 0].min(axis=1), uv[:, :, 0].max(axis=1)
    v_lo, v_hi = uv[:, :, 1].min(axis=1), uv[:, :, 1].max(axis=1)
    for v0 in range(0, nv, tile):
        v1 = min(v0 + tile, nv)
        row_sel = (v_hi >= v0 - 0.5) & (v_lo <= v1 - 0.5)
        if not np.any(row_sel):
            continue
        for u0 in range(0, nu, tile):
            u1 = min(u0 + tile, nu)
            sel = row_sel & (u_hi >= u0 - 0.5) & (u_lo <= u1 - 0.5)
            if not np.any(sel):
                continue
            vv, uu = np.meshgrid(np.arange(v0, v1), np.arange(u0, u1), indexing="ij")
            origins, dirs = geom.pixel_rays(k, uu.ravel(), vv.ravel())
            try:
                lengths = ray_inside_lengths(tris, origins, dirs, triangle_subset=np.nonzero(sel)[0])
            except GeometryIntegrityError as e:
                raise GeometryIntegrityError(f"view {k}, tile (u={u0}, v={v0}): {e}") from e
            image[v0:v1, u0:u1] = lengths.reshape(v1 - v0, u1 - u0)
    return image
