"""
Runtime configuration for meshseed: logging setup, worker count resolution,
stage timing and host information for run manifests.
"""

import json
import logging
import os
import platform
import sys
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, Optional, Union

import numpy as np
import psutil
import scipy

from src.constants import LOGLEVEL_ENV_VAR, THREADS_ENV_VAR
from src.exceptions import ConfigurationError

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s | %(levelname)s | %(name)s | %(message)s"
LOG_DATEFMT = "%Y-%m-%d %H:%M:%S"


def setup_logging(log_level: Optional[str] = None, log_file: Optional[Union[str, Path]] = None):
    """Configure the root logger once for a CLI run."""
    level_name = (log_level or os.environ.get(LOGLEVEL_ENV_VAR) or "INFO").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        raise ConfigurationError(f"unknown log level {level_name!r}")
    handlers = [logging.StreamHandler(sys.stdout)]
    if log_file is not None:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, mode="a", encoding="utf-8"))
    logging.basicConfig(level=level, format=LOG_FORMAT, datefmt=LOG_DATEFMT, handlers=handlers, force=True)

    # Reduce logging for noisy libraries
    logging.getLogger("numba").setLevel(logging.WARNING)
    logging.getLogger("matplotlib").setLevel(logging.WARNING)


def add_log_file(log_file: Union[str, Path]) -> logging.Handler:
    """Mirror the root logger into ``log_file`` (appending)."""
    Path(log_file).parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(log_file, mode="a", encoding="utf-8")
    handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=LOG_DATEFMT))
    logging.getLogger().addHandler(handler)
    return handler


def resolve_worker_count(cli_threads: Optional[int] = None, config_threads: int = 0) -> int:
    """``--threads``, else ``MESHSEED_THREADS``, else ``config.threads``, else ``os.cpu_count()``."""
    if cli_threads is not None:
        source, value = "--threads", cli_threads
    elif os.environ.get(THREADS_ENV_VAR):
        raw = os.environ[THREADS_ENV_VAR]
        try:
            value = int(raw)
        except ValueError as e:
            raise ConfigurationError(f"{THREADS_ENV_VAR} must be an integer, got {raw!r}") from e
        source = THREADS_ENV_VAR
    elif config_threads:
        source, value = "config.threads", config_threads
    else:
        source, value = "os.cpu_count()", os.cpu_count() or 1
    if value < 1:
        raise ConfigurationError(f"worker count from {source} must be >= 1, got {value}")
    logger.debug(f"Using {value} worker(s) ({source})")
    return int(value)


class StageTimer:
    """
    Wall-clock durations per pipeline stage
    """

    def __init__(self):
        self.metrics: Dict[str, list] = {}

    def record(self, stage: str, seconds: float):
        self.metrics.setdefault(stage, []).append(float(seconds))

    @contextmanager
    def measure(self, stage: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            elapsed = time.perf_counter() - start
            self.record(stage, elapsed)
            logger.info(f"Stage {stage} finished in {elapsed:.3f} s")

    def get_stats(self, stage: Optional[str] = None) -> Dict[str, Any]:
        if stage is None:
            return {name: self.get_stats(name) for name in self.metrics}
        values = self.metrics.get(stage)
        if not values:
            return {"error": f"No data for stage {stage}"}
        ordered = sorted(values)
        return {
            "count": len(values),
            "total": sum(values),
            "mean": sum(values) / len(values),
            "min": ordered[0],
            "max": ordered[-1],
            "p50": ordered[len(ordered) // 2],
            "p95": ordered[int(len(ordered) * 0.95)],
            "p99": ordered[int(len(ordered) * 0.99)],
        }

    def total(self) -> float:
        return float(sum(sum(v) for v in self.metrics.values()))

    def reset(self):
        self.metrics = {}


def get_system_info() -> Dict[str, Any]:
    memory = psutil.virtual_memory()
    return {
        "platform": platform.platform(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "cpu_logical": psutil.cpu_count(logical=True),
        "cpu_physical": psutil.cpu_count(logical=False),
        "memory_total_gb": memory.total / (1024 ** 3),
        "memory_available_gb": memory.available / (1024 ** 3),
    }


def get_process_memory_mb() -> float:
    return psutil.Process().memory_info().rss / (1024 ** 2)


if __name__ == "__main__":
    setup_logging()
    print(json.dumps(get_system_info(), indent=2))
