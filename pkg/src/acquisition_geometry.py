"""
Circular cone-beam acquisition geometry.

Conventions: the isocenter is the origin and the source rotates about +z.
At angle 0 the source sits at (0, -sod, 0), the flat detector is centered
at (0, sdd - sod, 0) and faces the source, its u axis is +x and its v axis
is +z. Every other view is the angle-0 frame rotated by ``angles[k]`` about z.
Detector images are stored as (nv, nu) arrays, rows indexed by v.
"""

import dataclasses
import logging
import math
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from src.constants import UNIT_NORM_TOL
from src.exceptions import InvalidGeometryError, ParseError, ProjectionDomainError
from src.utils import read_json, write_json

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(origin)) and np.all(np.isfinite(direction))):
            raise InvalidGeometryError("ray origin and direction must be finite")
        if abs(float(np.linalg.norm(direction)) - 1.0) > UNIT_NORM_TOL:
            raise InvalidGeometryError(f"ray direction is not unit length: |d|={np.linalg.norm(direction)!r}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)

    @classmethod
    def through(cls, origin, target) -> "Ray":
        origin = np.asarray(origin, dtype=np.float64)
        d = np.asarray(target, dtype=np.float64) - origin
        norm = np.linalg.norm(d)
        if norm == 0.0:
            raise InvalidGeometryError("ray origin and target coincide")
        return cls(origin, d / norm)

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction

    def distance_to(self, p) -> float:
        w = np.asarray(p, dtype=np.float64) - self.origin
        return float(np.linalg.norm(w - np.dot(w, self.direction) * self.direction))


def rotation_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclasses.dataclass(frozen=True)
class ViewFrame:
    source: np.ndarray
    detector_center: np.ndarray
    e_u: np.ndarray
    e_v: np.ndarray
    normal: np.ndarray


@dataclasses.dataclass(frozen=True)
class AcquisitionGeometry:
    num_projections: int
    sod: float
    sdd: float
    detector_pixels: Tuple[int, int]
    pixel_pitch: Tuple[float, float]
    angles: Tuple[float, ...]

    def __post_init__(self):
        if int(self.num_projections) < 1:
            raise InvalidGeometryError(f"num_projections must be >= 1, got {self.num_projections}")
        if not (self.sdd > self.sod > 0):
            raise InvalidGeometryError(
                f"expected sdd > sod > 0, got sod={self.sod}, sdd={self.sdd}"
            )
        nu, nv = (int(n) for n in self.detector_pixels)
        if nu < 2 or nv < 2:
            raise InvalidGeometryError(f"detector needs at least 2x2 pixels, got {self.detector_pixels}")
        du, dv = (float(p) for p in self.pixel_pitch)
        if not (du > 0 and dv > 0):
            raise InvalidGeometryError(f"pixel pitch must be positive, got {self.pixel_pitch}")
        angles = tuple(float(a) for a in self.angles)
        if len(angles) != int(self.num_projections):
            raise InvalidGeometryError(
                f"angles has {len(angles)} entries, expected num_projections={self.num_projections}"
            )
        if not all(math.isfinite(a) for a in angles):
            raise InvalidGeometryError("angles must be finite")
        object.__setattr__(self, "num_projections", int(self.num_projections))
        object.__setattr__(self, "sod", float(self.sod))
        object.__setattr__(self, "sdd", float(self.sdd))
        object.__setattr__(self, "detector_pixels", (nu, nv))
        object.__setattr__(self, "pixel_pitch", (du, dv))
        object.__setattr__(self, "angles", angles)

    @property
    def nu(self) -> int:
        return self.detector_pixels[0]

    @property
    def nv(self) -> int:
        return self.detector_pixels[1]

    @property
    def magnification(self) -> float:
        return self.sdd / self.sod

    @property
    def image_shape(self) -> Tuple[int, int]:
        return (self.nv, self.nu)

    def _check_view(self, k: int) -> int:
        if not 0 <= int(k) < self.num_projections:
            raise IndexError(f"projection index {k} out of range [0, {self.num_projections})")
        return int(k)

    def frame(self, k: int) -> ViewFrame:
        k = self._check_view(k)
        rot = rotation_z(self.angles[k])
        return ViewFrame(
            source=rot @ np.array([0.0, -self.sod, 0.0]),
            detector_center=rot @ np.array([0.0, self.sdd - self.sod, 0.0]),
            e_u=rot @ np.array([1.0, 0.0, 0.0]),
            e_v=np.array([0.0, 0.0, 1.0]),
            normal=rot @ np.array([0.0, 1.0, 0.0]),
        )

    def detector_points(self, k: int, u, v) -> np.ndarray:
        """World position of (possibly fractional) pixel coordinates on view k."""
        f = self.frame(k)
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        u_mm = (u - (self.nu - 1) / 2.0) * self.pixel_pitch[0]
        v_mm = (v - (self.nv - 1) / 2.0) * self.pixel_pitch[1]
        return f.detector_center + u_mm[..., None] * f.e_u + v_mm[..., None] * f.e_v

    def ray_for_pixel(self, k: int, u: float, v: float) -> Ray:
        k = self._check_view(k)
        if not (0 <= u < self.nu) or not (0 <= v < self.nv):
            raise IndexError(f"pixel ({u}, {v}) outside detector {self.nu}x{self.nv}")
        return Ray.through(self.frame(k).source, self.detector_points(k, u, v))

    def pixel_rays(self, k: int, u=None, v=None) -> Tuple[np.ndarray, np.ndarray]:
        """Origins and unit directions for a batch of pixels of view k.

        Without ``u``/``v`` every pixel is returned in row-major (v, u) order.
        """
        k = self._check_view(k)
        if u is None or v is None:
            vv, uu = np.meshgrid(np.arange(self.nv), np.arange(self.nu), indexing="ij")
            u, v = uu.ravel(), vv.ravel()
        u = np.asarray(u, dtype=np.float64).ravel()
        v = np.asarray(v, dtype=np.float64).ravel()
        if u.size and (u.min() < 0 or u.max() >= self.nu or v.min() < 0 or v.max() >= self.nv):
            raise IndexError(f"pixel batch outside detector {self.nu}x{self.nv}")
        source = self.frame(k).source
        d = self.detector_points(k, u, v) - source
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return np.broadcast_to(source, d.shape).copy(), d

    def project_points(self, k: int, points) -> np.ndarray:
        """Continuous detector coordinates (u, v) of points as seen from view k."""
        f = self.frame(k)
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        w = pts - f.source
        depth = w @ f.normal
        if np.any(depth <= 0):
            raise ProjectionDomainError(f"point behind or at the source for view {k}")
        scale = self.sdd / depth
        u = scale * (w @ f.e_u) / self.pixel_pitch[0] + (self.nu - 1) / 2.0
        v = scale * (w @ f.e_v) / self.pixel_pitch[1] + (self.nv - 1) / 2.0
        return np.stack([u, v], axis=1)

    def project_point(self, k: int, p) -> Tuple[float, float]:
        u, v = self.project_points(k, p)[0]
        return float(u), float(v)

    def to_dict(self) -> dict:
        return {
            "num_projections": self.num_projections,
            "sod_mm": self.sod,
            "sdd_mm": self.sdd,
            "detector_px": list(self.detector_pixels),
            "pixel_pitch_mm": list(self.pixel_pitch),
            "angles_rad": list(self.angles),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "AcquisitionGeometry":
        try:
            return cls(
                num_projections=payload["num_projections"],
                sod=payload["sod_mm"],
                sdd=payload["sdd_mm"],
                detector_pixels=tuple(payload["detector_px"]),
                pixel_pitch=tuple(payload["pixel_pitch_mm"]),
                angles=tuple(payload["angles_rad"]),
            )
        except KeyError as e:
            raise ParseError(f"geometry document is missing key {e.args[0]!r}") from e

    def save(self, path: Union[str, Path]) -> Path:
        return write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "AcquisitionGeometry":
        return cls.from_dict(read_json(path))


def uniform_angles(num_projections: int) -> Tuple[float, ...]:
    return tuple(2.0 * math.pi * k / num_projections for k in range(num_projections))


def make_circular_geometry(
    num_projections: int,
    sod: float,
    sdd: float,
    detector_pixels: Sequence[int],
    pixel_pitch: Sequence[float],
    angles: Optional[Sequence[float]] = None,
) -> AcquisitionGeometry:
    if int(num_projections) < 1:
        raise InvalidGeometryError(f"num_projections must be >= 1, got {num_projections}")
    if angles is None:
        angles = uniform_angles(int(num_projections))
    geom = AcquisitionGeometry(
        num_projections=int(num_projections),
        sod=sod,
        sdd=sdd,
        detector_pixels=tuple(detector_pixels),
        pixel_pitch=tuple(pixel_pitch),
        angles=tuple(angles),
    )
    logger.debug(
        f"Circular geometry: K={geom.num_projections}, sod={geom.sod} mm, sdd={geom.sdd} mm, "
        f"detector={geom.nu}x{geom.nv} @ {geom.pixel_pitch} mm"
    )
    return geom
