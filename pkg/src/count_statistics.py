"""
Statistical filter for backprojection counts.

Non-null voxel counts are modelled as zero-truncated Poisson (ZTP). Each
z-slice is tested for dispersion (Fisher index against a lower-tail
chi-square quantile); under-dispersed slices keep the ZTP model with a
Plackett rate estimate, the others fall back to a plain Poisson model. The
upper tolerant limit of the chosen model is the count threshold lambda.
"""

import dataclasses
import logging
import math
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from scipy import special, stats

from src.constants import PLACKETT_THETA_FLOOR
from src.exceptions import (
    ConfigurationError,
    ConvergenceError,
    DispersionTestInapplicable,
    DomainError,
    EstimationError,
    ParseError,
)
from src.utils import parallel_map, read_json, write_json

logger = logging.getLogger(__name__)


class QuantileMethod(Enum):
    EXACT = "exact"
    GILCHRIST = "gilchrist"
    PRINTED = "printed"

    @classmethod
    def from_str(cls, method: str) -> "QuantileMethod":
        for member in cls:
            if member.value == str(method).lower():
                return member
        raise ConfigurationError(f"Unsupported quantile method: {method}")


class CountModel(Enum):
    ZTP = "ZTP"
    POISSON = "Poisson"

    @classmethod
    def from_str(cls, model: str) -> "CountModel":
        for member in cls:
            if member.value.lower() == str(model).lower():
                return member
        raise ParseError(f"Unknown count model: {model}")


def _check_theta(theta: float):
    if not (theta > 0 and math.isfinite(theta)):
        raise DomainError(f"rate parameter must be positive and finite, got {theta}")


def quantile_guard(theta: float) -> int:
    return int(math.ceil(theta + 20.0 * math.sqrt(theta) + 50.0))


# Zero-truncated Poisson

def ztp_log_pmf(theta: float, n) -> np.ndarray:
    _check_theta(theta)
    n = np.asarray(n)
    if np.any(n < 1):
        raise DomainError("ZTP support starts at 1")
    n = n.astype(np.float64)
    return -theta + n * math.log(theta) - special.gammaln(n + 1.0) - math.log(-math.expm1(-theta))


def ztp_pmf(theta: float, n):
    p = np.exp(ztp_log_pmf(theta, n))
    return float(p) if np.ndim(p) == 0 else p


def _ztp_running_cdf(theta: float, n_max: int) -> np.ndarray:
    """cdf(1..n_max) as a sequential running sum."""
    return np.cumsum(np.exp(ztp_log_pmf(theta, np.arange(1, n_max + 1))))


def ztp_cdf(theta: float, n: int) -> float:
    n = int(n)
    if n < 1:
        raise DomainError("ZTP support starts at 1")
    return float(min(1.0, _ztp_running_cdf(theta, n)[-1]))


def ztp_rvs(theta: float, size, rng: np.random.Generator) -> np.ndarray:
    """Draws by inverting the Poisson cdf above its zero mass."""
    _check_theta(theta)
    # support starts at 1
    u = rng.uniform(low=np.nextafter(stats.poisson.pmf(0, theta), 1.0), high=1.0, size=size)
    return np.maximum(stats.poisson.ppf(u, theta), 1).astype(np.int64)


@dataclasses.dataclass(frozen=True)
class ZtpModel:
    theta: float

    def __post_init__(self):
        _check_theta(self.theta)

    def pmf(self, n):
        return ztp_pmf(self.theta, n)

    def cdf(self, n: int) -> float:
        return ztp_cdf(self.theta, n)

    @property
    def mean(self) -> float:
        return self.theta / -math.expm1(-self.theta)

    @property
    def variance(self) -> float:
        mu = self.mean
        return mu * (1.0 + self.theta - mu)

    @property
    def dispersion_index(self) -> float:
        """Var/mean = 1 + theta - mu, below 1 for every theta > 0."""
        return 1.0 + self.theta - self.mean

    def truncation_bound(self, n_max: int) -> float:
        """Upper bound of the ZTP mass beyond ``n_max``."""
        tail = stats.poisson.sf(n_max, self.theta)
        return float(tail / -math.expm1(-self.theta))

    def quantile(self, alpha: float, method: Union[str, QuantileMethod] = QuantileMethod.EXACT) -> int:
        return ztp_quantile(self, alpha, method)


# Poisson

def poisson_log_pmf(theta: float, n) -> np.ndarray:
    _check_theta(theta)
    n = np.asarray(n, dtype=np.float64)
    return -theta + n * math.log(theta) - special.gammaln(n + 1.0)


def _poisson_running_cdf(theta: float, n_max: int) -> np.ndarray:
    return np.cumsum(np.exp(poisson_log_pmf(theta, np.arange(0, n_max + 1))))


def poisson_cdf(theta: float, n: int) -> float:
    n = int(n)
    if n < 0:
        return 0.0
    return float(min(1.0, _poisson_running_cdf(theta, n)[-1]))


def _check_level(level: float, name: str = "level"):
    if not 0.0 < level < 1.0:
        raise DomainError(f"{name} must be in (0, 1), got {level}")


def poisson_quantile(theta: float, level: float) -> int:
    """Smallest integer q with cdf(q) >= level, scanning up to the guard."""
    _check_level(level)
    guard = quantile_guard(theta)
    cdf = _poisson_running_cdf(theta, guard)
    hits = np.nonzero(cdf >= level)[0]
    if hits.size == 0:
        raise DomainError(f"Poisson quantile at level {level} exceeds the guard {guard} for theta={theta}")
    return int(hits[0])


def ztp_quantile(model: Union[ZtpModel, float], alpha: float, method: Union[str, QuantileMethod] = QuantileMethod.EXACT) -> int:
    """Upper tolerant limit: smallest lambda with P(N <= lambda) >= 1 - alpha."""
    theta = model.theta if isinstance(model, ZtpModel) else float(model)
    _check_theta(theta)
    _check_level(alpha, "alpha")
    method = method if isinstance(method, QuantileMethod) else QuantileMethod.from_str(method)
    level = 1.0 - alpha

    if method is QuantileMethod.EXACT:
        guard = quantile_guard(theta)
        cdf = _ztp_running_cdf(theta, guard)
        hits = np.nonzero(cdf >= level)[0]
        if hits.size == 0:
            raise DomainError(f"ZTP quantile at level {level} exceeds the guard {guard} for theta={theta}")
        return int(hits[0]) + 1

    f0 = math.exp(-theta)
    if method is QuantileMethod.GILCHRIST:
        return max(1, poisson_quantile(theta, f0 + level * (1.0 - f0)))

    # literal printed form, F(1) - (1 - alpha)(1 - F(1)); defined only when it lands in (0, 1)
    f1 = poisson_cdf(theta, 1)
    printed_level = f1 - level * (1.0 - f1)
    if not 0.0 < printed_level < 1.0:
        raise DomainError(
            f"printed conversion gives Poisson level {printed_level:.6f} outside (0, 1) for theta={theta}, alpha={alpha}"
        )
    return poisson_quantile(theta, printed_level)


# Estimators

def plackett_estimate(non_null_counts: Sequence[int]) -> float:
    """theta = (sum n - #{n == 1}) / L, floored at 1e-6."""
    counts = np.asarray(non_null_counts, dtype=np.int64).ravel()
    if counts.size == 0:
        raise EstimationError("Plackett estimate of an empty sample")
    if np.any(counts < 1):
        raise DomainError("Plackett estimate needs counts >= 1")
    theta = (int(counts.sum()) - int(np.count_nonzero(counts == 1))) / counts.size
    return max(theta, PLACKETT_THETA_FLOOR)


def ztp_mle_estimate(non_null_counts: Sequence[int], max_iter: int = 100, tol: float = 1e-12) -> float:
    """Maximum-likelihood rate: Newton on theta / (1 - exp(-theta)) = mean."""
    counts = np.asarray(non_null_counts, dtype=np.float64).ravel()
    if counts.size == 0:
        raise EstimationError("ML estimate of an empty sample")
    mean = float(counts.mean())
    if mean <= 1.0:
        return PLACKETT_THETA_FLOOR
    theta = mean
    for _ in range(max_iter):
        q = -math.expm1(-theta)
        g = theta / q - mean
        dg = (q - theta * math.exp(-theta)) / (q * q)
        step = g / dg
        theta = max(theta - step, PLACKETT_THETA_FLOOR)
        if abs(step) < tol * max(1.0, theta):
            return theta
    raise ConvergenceError(f"ZTP ML estimate did not converge for mean {mean}")


ESTIMATORS: Dict[str, Callable[[Sequence[int]], float]] = {
    "plackett": plackett_estimate,
    "mle": ztp_mle_estimate,
}


# Dispersion test

@dataclasses.dataclass(frozen=True)
class DispersionResult:
    t_f: float
    s: int
    mean: float
    variance: float


def fisher_dispersion_statistic(slice_counts: Sequence[int], use_non_null_only: bool = True) -> DispersionResult:
    """T_f = S * V^2 / mean with the unbiased variance V^2."""
    counts = np.asarray(slice_counts, dtype=np.float64).ravel()
    if use_non_null_only:
        counts = counts[counts > 0]
    s = int(counts.size)
    if s < 2:
        raise DispersionTestInapplicable(f"dispersion test needs S >= 2 observations, got {s}")
    mean = float(counts.mean())
    if mean <= 0:
        raise DispersionTestInapplicable("dispersion test needs a positive mean")
    variance = float(counts.var(ddof=1))
    return DispersionResult(t_f=s * variance / mean, s=s, mean=mean, variance=variance)


def chi_square_quantile(df: int, p: float, exact: bool = False) -> float:
    """Wilson-Hilferty approximation (relative error < 1e-3 for df >= 30)."""
    if int(df) < 1:
        raise DomainError(f"chi-square degrees of freedom must be >= 1, got {df}")
    _check_level(p, "p")
    if exact:
        return float(stats.chi2.ppf(p, df))
    h = 2.0 / (9.0 * df)
    z = float(special.ndtri(p))
    return df * (1.0 - h + z * math.sqrt(h)) ** 3


# Model selection

@dataclasses.dataclass
class SliceDecision:
    slice_index: int
    model: CountModel
    theta_hat: float
    lam: int
    t_f: Optional[float] = None
    s: int = 0
    mean: Optional[float] = None
    variance: Optional[float] = None
    inherited: bool = False
    reason: str = ""

    def to_dict(self) -> dict:
        return {
            "slice": self.slice_index,
            "model": self.model.value,
            "theta_hat": self.theta_hat,
            "lambda": self.lam,
            "t_f": self.t_f,
            "S": self.s,
            "mean": self.mean,
            "variance": self.variance,
            "inherited": self.inherited,
            "reason": self.reason,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SliceDecision":
        return cls(
            slice_index=int(payload["slice"]),
            model=CountModel.from_str(payload["model"]),
            theta_hat=float(payload["theta_hat"]),
            lam=int(payload["lambda"]),
            t_f=payload.get("t_f"),
            s=int(payload.get("S", 0)),
            mean=payload.get("mean"),
            variance=payload.get("variance"),
            inherited=bool(payload.get("inherited", False)),
            reason=payload.get("reason", ""),
        )


def select_model_and_threshold(
    volume,
    alpha_limit: float,
    alpha_test: float = 0.05,
    per_slice: bool = True,
    quantile_method: Union[str, QuantileMethod] = QuantileMethod.EXACT,
    use_non_null_only: bool = True,
    estimator: str = "plackett",
    workers: int = 1,
) -> List[SliceDecision]:
    """One decision per z-slice of the count volume."""
    _check_level(alpha_limit, "alpha_limit")
    _check_level(alpha_test, "alpha_test")
    if estimator not in ESTIMATORS:
        raise ConfigurationError(f"unknown estimator {estimator!r}; choose from {sorted(ESTIMATORS)}")
    estimate = ESTIMATORS[estimator]
    method = quantile_method if isinstance(quantile_method, QuantileMethod) else QuantileMethod.from_str(quantile_method)

    counts = np.asarray(volume.counts)
    nz = counts.shape[0]
    all_non_null = counts[counts > 0].astype(np.int64)

    if all_non_null.size == 0:
        logger.warning("Count volume has no non-null voxels; every slice gets an empty threshold")
        return [
            SliceDecision(z, CountModel.ZTP, 0.0, 1, inherited=True, reason="no non-null counts in volume")
            for z in range(nz)
        ]

    global_theta = estimate(all_non_null)
    global_lam = ztp_quantile(global_theta, alpha_limit, method)
    global_mean = float(all_non_null.mean())
    global_var = float(all_non_null.var(ddof=1)) if all_non_null.size > 1 else 0.0
    logger.info(
        f"Global ZTP: theta_hat={global_theta:.4f} from {all_non_null.size} non-null voxels, "
        f"lambda={global_lam} (alpha={alpha_limit}, {method.value})"
    )

    def inherit(z: int, reason: str, s: int = 0) -> SliceDecision:
        return SliceDecision(
            z, CountModel.ZTP, global_theta, global_lam, s=s, mean=global_mean if s else None,
            variance=global_var if s else None, inherited=True, reason=reason,
        )

    def decide(z: int) -> SliceDecision:
        if not per_slice:
            return inherit(z, "global decision", s=int(all_non_null.size))
        sl = counts[z].ravel().astype(np.int64)
        nn = sl[sl > 0]
        if nn.size == 0:
            return inherit(z, "empty slice")
        if np.all(nn == 1):
            return inherit(z, "all counts equal 1", s=int(nn.size))
        try:
            disp = fisher_dispersion_statistic(nn if use_non_null_only else sl, use_non_null_only=False)
        except DispersionTestInapplicable as e:
            return inherit(z, str(e), s=int(nn.size))
        quantile = chi_square_quantile(disp.s - 1, alpha_test)
        if disp.t_f > quantile:
            theta = float(nn.mean())
            lam = poisson_quantile(theta, 1.0 - alpha_limit)
            model = CountModel.POISSON
        else:
            theta = estimate(nn)
            lam = ztp_quantile(theta, alpha_limit, method)
            model = CountModel.ZTP
        return SliceDecision(z, model, theta, lam, t_f=disp.t_f, s=disp.s, mean=disp.mean, variance=disp.variance)

    decisions = parallel_map(decide, range(nz), workers=workers)
    for d in decisions:
        logger.debug(
            f"slice {d.slice_index}: {d.model.value} theta_hat={d.theta_hat:.4f} lambda={d.lam} "
            f"T_f={d.t_f} S={d.s}{' (' + d.reason + ')' if d.reason else ''}"
        )
    n_poisson = sum(d.model is CountModel.POISSON for d in decisions)
    n_inherited = sum(d.inherited for d in decisions)
    logger.info(f"Slice decisions: {nz - n_poisson} ZTP, {n_poisson} Poisson, {n_inherited} inherited")
    return decisions


def thresholds_by_slice(decisions: Sequence[SliceDecision], num_slices: int) -> np.ndarray:
    lam = np.full(num_slices, -1, dtype=np.int64)
    for d in decisions:
        if 0 <= d.slice_index < num_slices:
            lam[d.slice_index] = d.lam
    if np.any(lam < 0):
        missing = int(np.nonzero(lam < 0)[0][0])
        raise ConfigurationError(f"decisions do not cover slice {missing}")
    return lam


def write_decision_report(path: Union[str, Path], decisions: Sequence[SliceDecision], parameters: dict) -> Path:
    return write_json(path, {"parameters": parameters, "slices": [d.to_dict() for d in decisions]})


def read_decision_report(path: Union[str, Path]) -> List[SliceDecision]:
    payload = read_json(path)
    try:
        return [SliceDecision.from_dict(s) for s in payload["slices"]]
    except (KeyError, TypeError) as e:
        raise ParseError(f"malformed decision report {path}: {e}") from e
