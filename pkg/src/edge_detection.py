"""
Canny edge detection on projection images.

Stages: separable Gaussian smoothing (radius ceil(3 sigma), reflective
border), Sobel gradients, non-maximum suppression over four direction bins,
and double-threshold hysteresis over 8-connected components.
"""

import dataclasses
import logging
import math
import re
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from src.constants import (
    DEFAULT_GAUSSIAN_SIGMA,
    DEFAULT_HIGH_PERCENTILE,
    DEFAULT_LOW_RATIO,
    EDGE_FILE_PATTERN,
)
from src.exceptions import ConfigurationError, InputValidationError, ParseError
from src.utils import parallel_map

logger = logging.getLogger(__name__)

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)

# (row, col) offset of the forward neighbour for each direction bin
_BIN_OFFSETS = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}


@dataclasses.dataclass(frozen=True)
class CannyParams:
    gaussian_sigma: float = DEFAULT_GAUSSIAN_SIGMA
    high_percentile: float = DEFAULT_HIGH_PERCENTILE
    low_ratio: float = DEFAULT_LOW_RATIO
    low: Optional[float] = None
    high: Optional[float] = None

    def __post_init__(self):
        if not self.gaussian_sigma > 0:
            raise ConfigurationError(f"canny.gaussian_sigma must be > 0, got {self.gaussian_sigma}")
        if not 0 < self.high_percentile < 1:
            raise ConfigurationError(f"canny.high_percentile must be in (0, 1), got {self.high_percentile}")
        if not 0 < self.low_ratio < 1:
            raise ConfigurationError(f"canny.low_ratio must be in (0, 1), got {self.low_ratio}")
        if self.low is not None and self.high is not None and self.low > self.high:
            raise ConfigurationError(f"canny.low ({self.low}) exceeds canny.high ({self.high})")


@dataclasses.dataclass(eq=False)
class EdgeMap:
    bits: np.ndarray

    def __post_init__(self):
        self.bits = (np.asarray(self.bits) != 0).astype(np.uint8)

    @property
    def dims(self) -> Tuple[int, int]:
        """(nu, nv)"""
        return int(self.bits.shape[1]), int(self.bits.shape[0])

    @property
    def edge_count(self) -> int:
        return int(self.bits.sum())

    def edge_pixels(self) -> Tuple[np.ndarray, np.ndarray]:
        """(u, v) coordinates of edge pixels in row-major order."""
        v, u = np.nonzero(self.bits)
        return u, v


def gradient_field(image: np.ndarray, sigma: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    smoothed = ndimage.gaussian_filter(image, sigma=sigma, mode="reflect", radius=int(math.ceil(3.0 * sigma)))
    gx = ndimage.sobel(smoothed, axis=1, mode="reflect")
    gy = ndimage.sobel(smoothed, axis=0, mode="reflect")
    return np.hypot(gx, gy), gx, gy


def auto_thresholds(magnitudes: np.ndarray, params: CannyParams) -> Tuple[float, float]:
    nonzero = np.asarray(magnitudes, dtype=np.float64).ravel()
    nonzero = nonzero[nonzero > 0]
    if nonzero.size == 0:
        return 0.0, 0.0
    high = float(np.quantile(nonzero, params.high_percentile, method="inverted_cdf"))
    return params.low_ratio * high, high


def non_maximum_suppression(magnitude: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Keep pixels that are a strict maximum over the backward neighbour and
    not smaller than the forward neighbour along the quantized gradient."""
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    bins = np.zeros(magnitude.shape, dtype=np.int8)
    bins[(angle >= 22.5) & (angle < 67.5)] = 1
    bins[(angle >= 67.5) & (angle < 112.5)] = 2
    bins[(angle >= 112.5) & (angle < 157.5)] = 3

    rows, cols = magnitude.shape
    padded = np.pad(magnitude, 1, mode="constant", constant_values=0.0)
    thin = np.zeros_like(magnitude)
    for b, (dr, dc) in _BIN_OFFSETS.items():
        forward = padded[1 + dr:1 + dr + rows, 1 + dc:1 + dc + cols]
        backward = padded[1 - dr:1 - dr + rows, 1 - dc:1 - dc + cols]
        keep = (bins == b) & (magnitude > 0) & (magnitude > backward) & (magnitude >= forward)
        thin[keep] = magnitude[keep]
    return thin


def hysteresis(thin: np.ndarray, low: float, high: float) -> np.ndarray:
    if high <= 0:
        return np.zeros(thin.shape, dtype=np.uint8)
    weak = (thin > 0) & (thin >= low)
    strong = weak & (thin >= high)
    labels, count = ndimage.label(weak, structure=EIGHT_CONNECTED)
    if count == 0:
        return np.zeros(thin.shape, dtype=np.uint8)
    keep = np.zeros(count + 1, dtype=bool)
    keep[np.unique(labels[strong])] = True
    keep[0] = False
    return keep[labels].astype(np.uint8)


def canny_edges(image: np.ndarray, params: Optional[CannyParams] = None) -> EdgeMap:
    params = params or CannyParams()
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 3:
        raise InputValidationError(f"edge detection needs a 2D image of at least 3x3, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise InputValidationError("image contains NaN or infinite pixels")

    magnitude, gx, gy = gradient_field(img, params.gaussian_sigma)
    low, high = auto_thresholds(magnitude, params)
    if params.high is not None:
        high = float(params.high)
        low = params.low_ratio * high
    if params.low is not None:
        low = float(params.low)
    thin = non_maximum_suppression(magnitude, gx, gy)
    return EdgeMap(hysteresis(thin, low, high))


def detect_edges(images: Sequence[np.ndarray], params: Optional[CannyParams] = None, workers: int = 1) -> List[EdgeMap]:
    params = params or CannyParams()
    maps = parallel_map(lambda img: canny_edges(img, params), list(images), workers=workers, desc="edges")
    counts = [m.edge_count for m in maps]
    if counts:
        logger.info(
            f"Canny (sigma={params.gaussian_sigma}, p={params.high_percentile}, ratio={params.low_ratio}): "
            f"{sum(counts)} edge pixels over {len(maps)} maps (min {min(counts)}, max {max(counts)})"
        )
    return maps


# PBM / PGM

def write_pbm(path: Union[str, Path], edge_map: EdgeMap) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    nu, nv = edge_map.dims
    with open(path, "wb") as f:
        f.write(f"P4\n{nu} {nv}\n".encode("ascii"))
        f.write(np.packbits(edge_map.bits, axis=1).tobytes())
    return path


def write_pgm(path: Union[str, Path], edge_map: EdgeMap) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    nu, nv = edge_map.dims
    with open(path, "wb") as f:
        f.write(f"P5\n{nu} {nv}\n255\n".encode("ascii"))
        f.write((edge_map.bits * 255).astype(np.uint8).tobytes())
    return path


_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def _netpbm_header(data: bytes, fields: int) -> Tuple[List[bytes], int]:
    tokens, pos = [], 0
    for _ in range(fields):
        match = _TOKEN.match(data, pos)
        if match is None:
            raise ParseError("truncated netpbm header", offset=pos)
        tokens.append(match.group(1))
        pos = match.end()
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_edge_map(path: Union[str, Path]) -> EdgeMap:
    path = Path(path)
    data = path.read_bytes()
    magic = data[:2]
    if magic == b"P4":
        (_, w, h), start = _netpbm_header(data, 3)
        nu, nv = int(w), int(h)
        row_bytes = (nu + 7) // 8
        need = row_bytes * nv
        if len(data) - start < need:
            raise ParseError(f"{path.name}: raster truncated", offset=len(data))
        packed = np.frombuffer(data, dtype=np.uint8, count=need, offset=start).reshape(nv, row_bytes)
        return EdgeMap(np.unpackbits(packed, axis=1)[:, :nu])
    if magic == b"P5":
        (_, w, h, _maxval), start = _netpbm_header(data, 4)
        nu, nv = int(w), int(h)
        if len(data) - start < nu * nv:
            raise ParseError(f"{path.name}: raster truncated", offset=len(data))
        raster = np.frombuffer(data, dtype=np.uint8, count=nu * nv, offset=start).reshape(nv, nu)
        return EdgeMap(raster > 0)
    raise ParseError(f"{path.name}: unsupported netpbm magic {magic!r}", offset=0)


def save_edge_maps(directory: Union[str, Path], maps: Sequence[EdgeMap]) -> List[Path]:
    directory = Path(directory)
    return [write_pbm(directory / EDGE_FILE_PATTERN.format(index=k), m) for k, m in enumerate(maps)]


def load_edge_maps(directory: Union[str, Path]) -> List[EdgeMap]:
    directory = Path(directory)
    paths = sorted(directory.glob("edge_*.pbm"))
    if not paths:
        raise ParseError(f"no edge maps found in {directory}")
    return [read_edge_map(p) for p in paths]
