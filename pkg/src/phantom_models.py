"""
Object models for projection simulation and ground-truth distances.

A phantom is an ordered list of analytic primitives (sphere, ellipsoid,
closed cone) with additive attenuation deltas, optionally together with a
closed triangle mesh of uniform attenuation. Line integrals are exact chord
lengths; surface distances are exact for spheres and cones and converge to
1e-9 mm for ellipsoids.
"""

import abc
import dataclasses
import json
import logging
import math
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.acquisition_geometry import AcquisitionGeometry, Ray
from src.constants import FALLBACK_SURFACE_SAMPLES, NEWTON_MAX_ITER, NEWTON_TOL_MM
from src.exceptions import ConfigurationError, GeometryIntegrityError, ParseError
from src.stl_mesh import TriangleMesh, load_stl, view_inside_lengths
from src.utils import chunk_ranges, parallel_map, read_json, read_raw, write_json, write_raw

logger = logging.getLogger(__name__)

ASSET_DIR = Path(__file__).resolve().parent / "assets"
RAYS_PER_CHUNK = 65536


class PrimitiveKind(Enum):
    SPHERE = "sphere"
    ELLIPSOID = "ellipsoid"
    CONE = "cone"

    @classmethod
    def from_str(cls, kind: str) -> "PrimitiveKind":
        for member in cls:
            if member.value == str(kind).lower():
                return member
        raise ValueError(f"Unsupported primitive kind: {kind}")


def rotation_from_degrees(rx: float = 0.0, ry: float = 0.0, rz: float = 0.0) -> np.ndarray:
    """R = Rz @ Ry @ Rx; columns are the primitive's local axes in world space."""
    ax, ay, az = (math.radians(a) for a in (rx, ry, rz))
    cx, sx, cy, sy, cz, sz = math.cos(ax), math.sin(ax), math.cos(ay), math.sin(ay), math.cos(az), math.sin(az)
    r_x = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    r_y = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    r_z = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return r_z @ r_y @ r_x


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    polar = np.arccos(1.0 - 2.0 * i / n)
    azimuth = math.pi * (1.0 + 5.0 ** 0.5) * i
    return np.stack(
        [np.cos(azimuth) * np.sin(polar), np.sin(azimuth) * np.sin(polar), np.cos(polar)], axis=1
    )


@dataclasses.dataclass(eq=False)
class Primitive(abc.ABC):
    center: np.ndarray
    rotation: np.ndarray
    attenuation: float

    kind = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3), atol=1e-12, rtol=0.0):
            raise ConfigurationError(f"{self.kind.value}: rotation is not orthonormal")
        if not math.isfinite(self.attenuation):
            raise ConfigurationError(f"{self.kind.value}: attenuation must be finite")
        self.attenuation = float(self.attenuation)
        self._validate()

    @abc.abstractmethod
    def _validate(self):
        ...

    def to_local(self, points: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(points) - self.center) @ self.rotation

    def dirs_to_local(self, directions: np.ndarray) -> np.ndarray:
        return np.atleast_2d(directions) @ self.rotation

    def to_world(self, local: np.ndarray) -> np.ndarray:
        return local @ self.rotation.T + self.center

    @abc.abstractmethod
    def chord_lengths(self, origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
        """Length of each half-line o + t d (t >= 0) inside the primitive."""

    @abc.abstractmethod
    def contains(self, points: np.ndarray) -> np.ndarray:
        ...

    @abc.abstractmethod
    def surface_distances(self, points: np.ndarray) -> np.ndarray:
        ...

    @abc.abstractmethod
    def surface_samples(self, n: int, rng: np.random.Generator) -> np.ndarray:
        ...

    @abc.abstractmethod
    def shape_dict(self) -> dict:
        ...

    def to_dict(self) -> dict:
        payload = {"kind": self.kind.value, "center": self.center.tolist()}
        payload.update(self.shape_dict())
        payload["rotation"] = self.rotation.tolist()
        payload["attenuation"] = self.attenuation
        return payload


def _quadric_interval(a, b, c):
    """Interval where a t^2 + 2 b t + c <= 0 for a > 0; empty intervals are (0, 0)."""
    disc = b * b - a * c
    ok = disc > 0
    root = np.sqrt(np.where(ok, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = np.where(ok, (-b - root) / a, 0.0)
        t2 = np.where(ok, (-b + root) / a, 0.0)
    return t1, t2


def _overlap(lo_a, hi_a, lo_b, hi_b):
    return np.maximum(0.0, np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b))


@dataclasses.dataclass(eq=False)
class Ellipsoid(Primitive):
    semi_axes: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    kind = PrimitiveKind.ELLIPSOID

    def _validate(self):
        self.semi_axes = tuple(float(a) for a in self.semi_axes)
        if len(self.semi_axes) != 3 or min(self.semi_axes) <= 0:
            raise ConfigurationError(f"{self.kind.value}: semi-axes must be three positive lengths")

    @property
    def axes(self) -> np.ndarray:
        return np.asarray(self.semi_axes)

    def chord_lengths(self, origins, directions):
        o = self.to_local(origins) / self.axes
        d = self.dirs_to_local(directions) / self.axes
        a = np.einsum("ij,ij->i", d, d)
        b = np.einsum("ij,ij->i", o, d)
        c = np.einsum("ij,ij->i", o, o) - 1.0
        t1, t2 = _quadric_interval(a, b, c)
        return _overlap(t1, t2, 0.0, np.inf)

    def contains(self, points):
        q = self.to_local(points) / self.axes
        return np.einsum("ij,ij->i", q, q) <= 1.0

    def surface_distances(self, points):
        y = np.abs(self.to_local(points))
        dist, converged = _ellipsoid_distance(y, self.axes)
        if not np.all(converged):
            bad = np.nonzero(~converged)[0]
            samples = self.axes * _fibonacci_sphere(FALLBACK_SURFACE_SAMPLES)
            spacing = float(self.axes.max()) * math.sqrt(4.0 * math.pi / FALLBACK_SURFACE_SAMPLES)
            for i in bad:
                dist[i] = float(np.min(np.linalg.norm(samples - y[i], axis=1)))
            logger.warning(
                f"Ellipsoid projection did not converge for {len(bad)} point(s); dense sampling used "
                f"(accuracy bound {spacing:.3e} mm)"
            )
        return dist

    def surface_samples(self, n, rng):
        u = rng.normal(size=(n, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        return self.to_world(u * self.axes)

    def shape_dict(self):
        return {"semi_axes": list(self.semi_axes)}


@dataclasses.dataclass(eq=False)
class Sphere(Ellipsoid):
    radius: float = 1.0

    kind = PrimitiveKind.SPHERE

    def _validate(self):
        self.radius = float(self.radius)
        if self.radius <= 0:
            raise ConfigurationError("sphere: radius must be positive")
        self.semi_axes = (self.radius,) * 3

    def chord_lengths(self, origins, directions):
        w = np.atleast_2d(origins) - self.center
        d = np.atleast_2d(directions)
        b = np.einsum("ij,ij->i", w, d)
        c = np.einsum("ij,ij->i", w, w) - self.radius ** 2
        t1, t2 = _quadric_interval(np.ones_like(b), b, c)
        return _overlap(t1, t2, 0.0, np.inf)

    def surface_distances(self, points):
        return np.abs(np.linalg.norm(np.atleast_2d(points) - self.center, axis=1) - self.radius)

    def shape_dict(self):
        return {"radius": self.radius}


@dataclasses.dataclass(eq=False)
class Cone(Primitive):
    """Closed right circular cone; ``center`` is the midpoint of its axis, apex at -z local."""

    half_angle: float = math.radians(30.0)
    height: float = 1.0

    kind = PrimitiveKind.CONE

    def _validate(self):
        self.half_angle = float(self.half_angle)
        self.height = float(self.height)
        if not (0.0 < self.half_angle < math.pi / 2) or self.height <= 0:
            raise ConfigurationError("cone: need 0 < half_angle < 90 deg and height > 0")

    @property
    def base_radius(self) -> float:
        return self.height * math.tan(self.half_angle)

    @property
    def apex(self) -> np.ndarray:
        return self.center - 0.5 * self.height * self.rotation[:, 2]

    def _meridian(self, points):
        q = self.to_local(points)
        r = np.hypot(q[:, 0], q[:, 1])
        h = q[:, 2] + 0.5 * self.height
        return r, h

    def chord_lengths(self, origins, directions):
        o = self.to_local(origins)
        d = self.dirs_to_local(directions)
        k = math.tan(self.half_angle) ** 2
        h0 = o[:, 2] + 0.5 * self.height
        # k h(t)^2 - (x(t)^2 + y(t)^2) >= 0 inside the double cone
        qa = k * d[:, 2] ** 2 - (d[:, 0] ** 2 + d[:, 1] ** 2)
        qb = k * h0 * d[:, 2] - (o[:, 0] * d[:, 0] + o[:, 1] * d[:, 1])
        qc = k * h0 ** 2 - (o[:, 0] ** 2 + o[:, 1] ** 2)
        disc = qb * qb - qa * qc
        root = np.sqrt(np.maximum(disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            r1 = (-qb - root) / qa
            r2 = (-qb + root) / qa
        lo_r, hi_r = np.minimum(r1, r2), np.maximum(r1, r2)
        inf = np.full_like(qa, np.inf)

        # up to two intervals where the quadric is non-negative
        a_lo, a_hi = np.zeros_like(qa), np.zeros_like(qa)
        b_lo, b_hi = np.zeros_like(qa), np.zeros_like(qa)
        neg = (qa < 0) & (disc > 0)
        a_lo[neg], a_hi[neg] = lo_r[neg], hi_r[neg]
        pos = qa > 0
        pos_split = pos & (disc > 0)
        a_lo[pos_split], a_hi[pos_split] = -inf[pos_split], lo_r[pos_split]
        b_lo[pos_split], b_hi[pos_split] = hi_r[pos_split], inf[pos_split]
        pos_all = pos & (disc <= 0)
        a_lo[pos_all], a_hi[pos_all] = -inf[pos_all], inf[pos_all]
        lin = qa == 0
        with np.errstate(divide="ignore", invalid="ignore"):
            t_lin = -qc / (2.0 * qb)
        up = lin & (qb > 0)
        a_lo[up], a_hi[up] = t_lin[up], inf[up]
        down = lin & (qb < 0)
        a_lo[down], a_hi[down] = -inf[down], t_lin[down]
        flat = lin & (qb == 0) & (qc >= 0)
        a_lo[flat], a_hi[flat] = -inf[flat], inf[flat]

        # slab 0 <= h <= height, restricted to t >= 0
        with np.errstate(divide="ignore", invalid="ignore"):
            s1 = -h0 / d[:, 2]
            s2 = (self.height - h0) / d[:, 2]
        s_lo = np.where(d[:, 2] != 0, np.minimum(s1, s2), np.where((h0 >= 0) & (h0 <= self.height), -np.inf, 0.0))
        s_hi = np.where(d[:, 2] != 0, np.maximum(s1, s2), np.where((h0 >= 0) & (h0 <= self.height), np.inf, 0.0))
        s_lo = np.maximum(s_lo, 0.0)
        s_hi = np.maximum(s_hi, s_lo)

        total = np.zeros_like(qa)
        for lo, hi in ((a_lo, a_hi), (b_lo, b_hi)):
            valid = hi > lo
            lo_c = np.maximum(lo, s_lo)
            hi_c = np.minimum(hi, s_hi)
            total += np.where(valid & (hi_c > lo_c), hi_c - lo_c, 0.0)
        return total

    def contains(self, points):
        r, h = self._meridian(points)
        return (h >= 0) & (h <= self.height) & (r <= h * math.tan(self.half_angle))

    def surface_distances(self, points):
        r, h = self._meridian(points)
        q = np.stack([r, h], axis=1)
        rim = np.array([self.base_radius, self.height])
        base_center = np.array([0.0, self.height])
        return np.minimum(_segment_distance_2d(q, np.zeros(2), rim), _segment_distance_2d(q, rim, base_center))

    def surface_samples(self, n, rng):
        lateral = math.pi * self.base_radius * math.hypot(self.base_radius, self.height)
        base = math.pi * self.base_radius ** 2
        n_lat = int(round(n * lateral / (lateral + base)))
        phi = rng.uniform(0.0, 2.0 * math.pi, size=n)
        s = np.sqrt(rng.uniform(0.0, 1.0, size=n))
        h = np.where(np.arange(n) < n_lat, s * self.height, self.height)
        r = s * self.base_radius
        local = np.stack([r * np.cos(phi), r * np.sin(phi), h - 0.5 * self.height], axis=1)
        return self.to_world(local)

    def shape_dict(self):
        return {"half_angle_deg": math.degrees(self.half_angle), "height": self.height}


def _segment_distance_2d(q: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip(((q - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(q - (a + t[:, None] * ab), axis=1)


def _ellipsoid_distance(y: np.ndarray, axes: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Distance from first-octant points ``y`` to an axis-aligned ellipsoid.

    Safeguarded Newton on F(t) = sum((a_i y_i / (t + a_i^2))^2) - 1 over the
    axes with y_i > 0, bracketed in [L, L + |a * y|] with L = -min a_i^2.
    """
    n = len(y)
    a2 = axes ** 2
    active = y > 0
    dist = np.zeros(n)
    converged = np.ones(n, dtype=bool)

    centre = ~active.any(axis=1)
    dist[centre] = axes.min()

    idx = np.nonzero(~centre)[0]
    if idx.size == 0:
        return dist, converged
    ya, act = y[idx], active[idx]
    ay = np.where(act, axes * ya, 0.0)
    low = -np.min(np.where(act, a2, np.inf), axis=1)
    high = low + np.linalg.norm(ay, axis=1)
    # start from the largest active axis estimate, clipped into the bracket
    p = np.argmax(np.where(act, ya / axes, -np.inf), axis=1)
    rows = np.arange(len(idx))
    t = -a2[p] + axes[p] * ya[rows, p]
    t = np.clip(t, low, high)
    t = np.where(t <= low, 0.5 * (low + high), t)

    def closest(tv):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(act, a2 * ya / (tv[:, None] + a2), 0.0)

    prev = np.full(len(idx), np.inf)
    done = np.zeros(len(idx), dtype=bool)
    for _ in range(NEWTON_MAX_ITER):
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            den = t[:, None] + a2
            ratio = np.where(act, ay / den, 0.0)
            f = np.sum(ratio ** 2, axis=1) - 1.0
            fp = -2.0 * np.sum(np.where(act, ratio ** 2 / den, 0.0), axis=1)
        low = np.where(f > 0, t, low)
        high = np.where(f < 0, t, high)
        with np.errstate(divide="ignore", invalid="ignore"):
            t_new = t - f / fp
        bad = ~np.isfinite(t_new) | (t_new <= low) | (t_new >= high)
        t_new = np.where(bad, 0.5 * (low + high), t_new)
        t_new = np.where(f == 0, t, t_new)
        t = np.where(done, t, t_new)
        d_now = np.linalg.norm(closest(t) - ya, axis=1)
        with np.errstate(invalid="ignore"):
            done |= np.abs(d_now - prev) < NEWTON_TOL_MM
        prev = d_now
        if done.all():
            break

    x = closest(t)
    # closest point may leave the plane of a zero coordinate (interior points)
    inactive_a2 = np.where(act, np.inf, a2)
    j = np.argmin(inactive_a2, axis=1)
    leaves = np.isfinite(inactive_a2[rows, j]) & (t < -a2[j])
    if np.any(leaves):
        tj = -a2[j[leaves]]
        with np.errstate(divide="ignore", invalid="ignore"):
            xs = np.where(act[leaves], a2 * ya[leaves] / (tj[:, None] + a2), 0.0)
        rest = 1.0 - np.sum(np.where(act[leaves], (xs / axes) ** 2, 0.0), axis=1)
        xs[np.arange(len(tj)), j[leaves]] = axes[j[leaves]] * np.sqrt(np.maximum(rest, 0.0))
        x[leaves] = xs
    dist[idx] = np.linalg.norm(x - ya, axis=1)
    converged[idx] = done
    return dist, converged


def primitive_from_dict(payload: dict) -> Primitive:
    try:
        kind = PrimitiveKind.from_str(payload["kind"])
        center = payload.get("center", [0.0, 0.0, 0.0])
        if "rotation" in payload:
            rotation = np.asarray(payload["rotation"], dtype=np.float64)
        else:
            rotation = rotation_from_degrees(*payload.get("rotation_deg", [0.0, 0.0, 0.0]))
        attenuation = float(payload.get("attenuation", 1.0))
        if kind is PrimitiveKind.SPHERE:
            return Sphere(center, rotation, attenuation, radius=payload["radius"])
        if kind is PrimitiveKind.ELLIPSOID:
            return Ellipsoid(center, rotation, attenuation, semi_axes=tuple(payload["semi_axes"]))
        return Cone(
            center,
            rotation,
            attenuation,
            half_angle=math.radians(payload["half_angle_deg"]),
            height=payload["height"],
        )
    except KeyError as e:
        raise ConfigurationError(f"primitive is missing field {e.args[0]!r}") from e
    except ValueError as e:
        if isinstance(e, ConfigurationError):
            raise
        raise ConfigurationError(str(e)) from e


@dataclasses.dataclass(eq=False)
class Phantom:
    primitives: List[Primitive] = dataclasses.field(default_factory=list)
    mesh: Optional[TriangleMesh] = None
    mesh_attenuation: float = 1.0
    name: str = ""
    family: str = "default"
    mesh_path: Optional[str] = None

    def __post_init__(self):
        if not self.primitives and self.mesh is None:
            raise ConfigurationError("phantom needs at least one primitive or a triangle mesh")

    @property
    def watertight(self) -> bool:
        return self.mesh is None or self.mesh.watertight

    def line_integrals(self, origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
        origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
        directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
        total = np.zeros(len(origins))
        for prim in self.primitives:
            if prim.attenuation != 0.0:
                total += prim.attenuation * prim.chord_lengths(origins, directions)
        if self.mesh is not None and self.mesh_attenuation != 0.0:
            self._require_watertight()
            total += self.mesh_attenuation * self.mesh.inside_lengths(origins, directions)
        return total

    def line_integral(self, ray: Ray) -> float:
        return float(self.line_integrals(ray.origin[None, :], ray.direction[None, :])[0])

    def attenuation_at(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        mu = np.zeros(len(pts))
        for prim in self.primitives:
            mu += np.where(prim.contains(pts), prim.attenuation, 0.0)
        if self.mesh is not None:
            mu += np.where(self.mesh.contains(pts), self.mesh_attenuation, 0.0)
        return mu

    def surface_distances(self, points, workers: int = 1) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if not np.all(np.isfinite(pts)):
            raise ConfigurationError("surface distance query with non-finite coordinates")
        best = np.full(len(pts), np.inf)
        for prim in self.primitives:
            best = np.minimum(best, prim.surface_distances(pts))
        if self.mesh is not None:
            best = np.minimum(best, self.mesh.surface_distances(pts, workers=workers))
        return best

    def surface_distance(self, p) -> float:
        return float(self.surface_distances(np.asarray(p, dtype=np.float64)[None, :])[0])

    def _require_watertight(self):
        if not self.watertight:
            raise GeometryIntegrityError(f"phantom {self.name or '<mesh>'}: triangle mesh is not watertight")

    def to_dict(self) -> dict:
        payload = {
            "name": self.name,
            "family": self.family,
            "primitives": [p.to_dict() for p in self.primitives],
        }
        if self.mesh is not None:
            payload["stl"] = {
                "path": self.mesh_path,
                "attenuation": self.mesh_attenuation,
                "triangles": self.mesh.num_triangles,
                "watertight": self.mesh.watertight,
            }
        return payload

    @classmethod
    def from_dict(cls, payload: dict, base_dir: Optional[Path] = None) -> "Phantom":
        primitives = [primitive_from_dict(p) for p in payload.get("primitives", [])]
        mesh, mesh_path, mesh_att = None, None, 1.0
        stl = payload.get("stl")
        if stl:
            mesh_path = stl["path"]
            path = Path(mesh_path)
            if not path.is_absolute() and base_dir is not None:
                path = base_dir / path
            mesh = load_stl(path)
            mesh_att = float(stl.get("attenuation", 1.0))
        return cls(
            primitives=primitives,
            mesh=mesh,
            mesh_attenuation=mesh_att,
            name=payload.get("name", ""),
            family=payload.get("family", "default"),
            mesh_path=mesh_path,
        )

    def save(self, path: Union[str, Path]) -> Path:
        return write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Phantom":
        path = Path(path)
        return cls.from_dict(read_json(path), base_dir=path.parent)


# Built-in library

def sphere_phantom(radius: float = 40.0, attenuation: float = 0.02, center=(0.0, 0.0, 0.0)) -> Phantom:
    return Phantom(
        primitives=[Sphere(center, np.eye(3), attenuation, radius=radius)],
        name="sphere",
        family="sphere",
    )


def cone_phantom(height: float = 70.0, half_angle_deg: float = 25.0, attenuation: float = 0.02) -> Phantom:
    return Phantom(
        primitives=[Cone((0.0, 0.0, 0.0), np.eye(3), attenuation, half_angle=math.radians(half_angle_deg), height=height)],
        name="cone",
        family="cone",
    )


def shepp_logan_phantom(scale_mm: float = 45.0, attenuation: float = 0.02) -> Phantom:
    """Shepp-Logan ellipsoids scaled from the unit cube to ``scale_mm`` half-width."""
    with open(ASSET_DIR / "shepp_logan_3d.json", "r", encoding="utf-8") as f:
        table = json.load(f)
    primitives = []
    for amp, a, b, c, x0, y0, z0, phi in table["ellipsoids"]:
        primitives.append(
            Ellipsoid(
                center=np.array([x0, y0, z0]) * scale_mm,
                rotation=rotation_from_degrees(0.0, 0.0, phi),
                attenuation=amp * attenuation,
                semi_axes=(a * scale_mm, b * scale_mm, c * scale_mm),
            )
        )
    return Phantom(primitives=primitives, name="shepp-logan", family="default")


BUILTIN_PHANTOMS = {
    "sphere": sphere_phantom,
    "cone": cone_phantom,
    "shepp-logan": shepp_logan_phantom,
}


def builtin_phantom(name: str, scale_mm: Optional[float] = None, attenuation: Optional[float] = None) -> Phantom:
    key = name.lower().replace("_", "-")
    if key not in BUILTIN_PHANTOMS:
        raise ConfigurationError(f"unknown built-in phantom {name!r}; choose from {sorted(BUILTIN_PHANTOMS)}")
    kwargs = {}
    if attenuation is not None:
        kwargs["attenuation"] = attenuation
    if scale_mm is not None:
        kwargs[{"sphere": "radius", "cone": "height", "shepp-logan": "scale_mm"}[key]] = scale_mm
    return BUILTIN_PHANTOMS[key](**kwargs)


# Projection simulation

@dataclasses.dataclass(eq=False)
class ProjectionSet:
    geometry: AcquisitionGeometry
    images: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images)
        expected = (self.geometry.num_projections, self.geometry.nv, self.geometry.nu)
        if self.images.shape != expected:
            raise ConfigurationError(f"projection images have shape {self.images.shape}, expected {expected}")

    def __len__(self):
        return self.images.shape[0]

    def save(self, raw_path: Union[str, Path], geometry_path: Union[str, Path]) -> None:
        write_raw(raw_path, self.images, "f4")
        self.geometry.save(geometry_path)

    @classmethod
    def load(cls, raw_path: Union[str, Path], geometry_path: Union[str, Path]) -> "ProjectionSet":
        geom = AcquisitionGeometry.load(geometry_path)
        count = geom.num_projections * geom.nv * geom.nu
        images = read_raw(raw_path, "f4", count).reshape(geom.num_projections, geom.nv, geom.nu)
        if not np.all(np.isfinite(images)):
            raise ParseError(f"{Path(raw_path).name}: non-finite projection values")
        return cls(geometry=geom, images=images.astype(np.float64))


def _project_view(phantom: Phantom, geom: AcquisitionGeometry, k: int) -> np.ndarray:
    image = np.zeros(geom.nu * geom.nv)
    if phantom.primitives:
        origins, dirs = geom.pixel_rays(k)
        for begin, end in chunk_ranges(len(origins), RAYS_PER_CHUNK):
            for prim in phantom.primitives:
                if prim.attenuation != 0.0:
                    image[begin:end] += prim.attenuation * prim.chord_lengths(origins[begin:end], dirs[begin:end])
    image = image.reshape(geom.nv, geom.nu)
    if phantom.mesh is not None and phantom.mesh_attenuation != 0.0:
        image += phantom.mesh_attenuation * view_inside_lengths(phantom.mesh, geom, k)
    return image


def simulate_projections(
    phantom: Phantom,
    geom: AcquisitionGeometry,
    workers: int = 1,
    progress: bool = False,
) -> ProjectionSet:
    """Noiseless line-integral images, one per view."""
    phantom._require_watertight()

    def run(k):
        try:
            return _project_view(phantom, geom, k)
        except GeometryIntegrityError as e:
            raise GeometryIntegrityError(f"projection {k}: {e}") from e

    images = parallel_map(run, range(geom.num_projections), workers=workers, desc="project", progress=progress)
    logger.info(f"Simulated {geom.num_projections} projections of {phantom.name or 'phantom'} ({geom.nu}x{geom.nv})")
    return ProjectionSet(geometry=geom, images=np.stack(images))
