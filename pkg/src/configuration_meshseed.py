"""meshseed pipeline config"""

import dataclasses
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import yaml
from omegaconf import OmegaConf
from omegaconf.errors import OmegaConfBaseException

from src.constants import (
    DEFAULT_ALPHA_TABLE,
    DEFAULT_GAUSSIAN_SIGMA,
    DEFAULT_HIGH_PERCENTILE,
    DEFAULT_KNN_K,
    DEFAULT_KNN_MULTIPLIER,
    DEFAULT_LOW_RATIO,
    DEFAULT_RELAX,
    FALLBACK_ALPHA,
)
from src.count_statistics import ESTIMATORS, QuantileMethod
from src.exceptions import ConfigurationError

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = Path(__file__).resolve().parent.parent / "config" / "pipeline.yaml"
MESH_METHODS = ("incremental", "qhull")


def _default_alpha_table() -> Dict[str, Dict[str, float]]:
    return {family: {str(edge): alpha for edge, alpha in row.items()} for family, row in DEFAULT_ALPHA_TABLE.items()}


@dataclasses.dataclass
class PhantomConfig:
    builtin: Optional[str] = "sphere"
    spec_path: Optional[str] = None
    stl_path: Optional[str] = None
    stl_attenuation: float = 0.02
    scale_mm: Optional[float] = None
    attenuation: Optional[float] = None
    # overrides the family used for the alpha table lookup
    family: Optional[str] = None


@dataclasses.dataclass
class GeometryConfig:
    num_projections: int = 30
    sod_mm: float = 500.0
    sdd_mm: float = 1000.0
    detector_px: List[int] = dataclasses.field(default_factory=lambda: [256, 256])
    pixel_pitch_mm: List[float] = dataclasses.field(default_factory=lambda: [0.8, 0.8])


@dataclasses.dataclass
class GridConfig:
    dims: List[int] = dataclasses.field(default_factory=lambda: [128, 128, 128])
    extent_mm: float = 100.0


@dataclasses.dataclass
class CannyConfig:
    gaussian_sigma: float = DEFAULT_GAUSSIAN_SIGMA
    high_percentile: float = DEFAULT_HIGH_PERCENTILE
    low_ratio: float = DEFAULT_LOW_RATIO
    low: Optional[float] = None
    high: Optional[float] = None


@dataclasses.dataclass
class FilterConfig:
    alpha_limit: Optional[float] = None
    alpha_table: Dict[str, Dict[str, float]] = dataclasses.field(default_factory=_default_alpha_table)
    alpha_test: float = 0.05
    per_slice: bool = True
    saturation: bool = True
    ridge_thinning: bool = True
    quantile_method: str = "exact"
    use_non_null_only: bool = True
    estimator: str = "plackett"


@dataclasses.dataclass
class CloudConfig:
    k: int = DEFAULT_KNN_K
    multiplier: float = DEFAULT_KNN_MULTIPLIER


@dataclasses.dataclass
class MeshConfig:
    method: str = "incremental"


@dataclasses.dataclass
class ReconConfig:
    relax: float = DEFAULT_RELAX
    sweeps: int = 20
    init: float = 0.0
    nonnegative: bool = True
    ray_stride: int = 4


@dataclasses.dataclass
class PipelineConfig:
    phantom: PhantomConfig = dataclasses.field(default_factory=PhantomConfig)
    geometry: GeometryConfig = dataclasses.field(default_factory=GeometryConfig)
    grid: GridConfig = dataclasses.field(default_factory=GridConfig)
    canny: CannyConfig = dataclasses.field(default_factory=CannyConfig)
    filter: FilterConfig = dataclasses.field(default_factory=FilterConfig)
    cloud: CloudConfig = dataclasses.field(default_factory=CloudConfig)
    mesh: MeshConfig = dataclasses.field(default_factory=MeshConfig)
    recon: ReconConfig = dataclasses.field(default_factory=ReconConfig)
    output_dir: str = "runs/default"
    seed: int = 0
    # 0 means "not set": fall back to os.cpu_count()
    threads: int = 0


def _read_layer(path: Union[str, Path]):
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        # JSON is a subset of YAML
        with open(path, "r", encoding="utf-8") as f:
            payload = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigurationError(f"cannot parse config {path}: {e}") from e
    if payload is None:
        payload = {}
    if not isinstance(payload, dict):
        raise ConfigurationError(f"config {path} must hold a mapping at top level")
    return OmegaConf.create(payload)


def load_config(path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = ()) -> PipelineConfig:
    """Schema defaults, then the file at ``path``, then ``block.key=value`` overrides."""
    try:
        layers = [OmegaConf.structured(PipelineConfig)]
        if path is not None:
            layers.append(_read_layer(path))
        if overrides:
            layers.append(OmegaConf.from_dotlist(list(overrides)))
        merged = OmegaConf.merge(*layers)
        cfg = OmegaConf.to_object(merged)
    except OmegaConfBaseException as e:
        raise ConfigurationError(f"invalid configuration: {e}") from e
    validate_config(cfg)
    if path is not None:
        logger.info(f"Loaded config from {path}" + (f" with {len(overrides)} override(s)" if overrides else ""))
    return cfg


def validate_config(cfg: PipelineConfig) -> None:
    if cfg.phantom.spec_path and cfg.phantom.stl_path:
        raise ConfigurationError("phantom.spec_path and phantom.stl_path are mutually exclusive")
    if not (cfg.phantom.spec_path or cfg.phantom.stl_path or cfg.phantom.builtin):
        raise ConfigurationError("phantom needs one of builtin, spec_path or stl_path")
    if len(cfg.geometry.detector_px) != 2 or len(cfg.geometry.pixel_pitch_mm) != 2:
        raise ConfigurationError("geometry.detector_px and geometry.pixel_pitch_mm need two entries")
    if len(cfg.grid.dims) != 3 or min(cfg.grid.dims) < 2:
        raise ConfigurationError(f"grid.dims must be three integers >= 2, got {list(cfg.grid.dims)}")
    if not cfg.grid.extent_mm > 0:
        raise ConfigurationError(f"grid.extent_mm must be > 0, got {cfg.grid.extent_mm}")
    if cfg.filter.alpha_limit is not None and not 0 < cfg.filter.alpha_limit < 1:
        raise ConfigurationError(f"filter.alpha_limit must be in (0, 1), got {cfg.filter.alpha_limit}")
    if not 0 < cfg.filter.alpha_test < 1:
        raise ConfigurationError(f"filter.alpha_test must be in (0, 1), got {cfg.filter.alpha_test}")
    QuantileMethod.from_str(cfg.filter.quantile_method)
    if cfg.filter.estimator not in ESTIMATORS:
        raise ConfigurationError(f"filter.estimator must be one of {sorted(ESTIMATORS)}, got {cfg.filter.estimator!r}")
    for family, row in cfg.filter.alpha_table.items():
        for edge, alpha in row.items():
            if not str(edge).isdigit() or not 0 < alpha < 1:
                raise ConfigurationError(f"filter.alpha_table.{family}.{edge}: bad entry {alpha!r}")
    if cfg.cloud.k < 1:
        raise ConfigurationError(f"cloud.k must be >= 1, got {cfg.cloud.k}")
    if cfg.cloud.multiplier < 0:
        raise ConfigurationError(f"cloud.multiplier must be >= 0, got {cfg.cloud.multiplier}")
    if cfg.mesh.method not in MESH_METHODS:
        raise ConfigurationError(f"mesh.method must be one of {MESH_METHODS}, got {cfg.mesh.method!r}")
    if not 0 < cfg.recon.relax < 2:
        raise ConfigurationError(f"recon.relax must be in (0, 2), got {cfg.recon.relax}")
    if cfg.recon.sweeps < 0 or cfg.recon.ray_stride < 1:
        raise ConfigurationError("recon.sweeps must be >= 0 and recon.ray_stride >= 1")
    if cfg.threads < 0:
        raise ConfigurationError(f"threads must be >= 0, got {cfg.threads}")


def config_to_dict(cfg: PipelineConfig) -> dict:
    return OmegaConf.to_container(OmegaConf.structured(cfg), resolve=True)


def effective_alpha(cfg: PipelineConfig, family: str, grid_edge: Optional[int] = None) -> float:
    """``filter.alpha_limit`` if set, else the table entry of ``family`` at the nearest tabulated grid edge."""
    if cfg.filter.alpha_limit is not None:
        return float(cfg.filter.alpha_limit)
    edge = int(grid_edge if grid_edge is not None else max(cfg.grid.dims))
    table = cfg.filter.alpha_table
    row = table.get(family) or table.get("default")
    if not row:
        logger.warning(f"No alpha table row for family {family!r}; using {FALLBACK_ALPHA}")
        return FALLBACK_ALPHA
    # nearest tabulated edge, ties resolved toward the finer grid
    best = min(row, key=lambda e: (abs(int(e) - edge), -int(e)))
    if int(best) != edge:
        logger.info(f"No alpha entry for {edge}^3 in row {family!r}; using the {best}^3 entry")
    return float(row[best])
