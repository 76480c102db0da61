import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Callable, Iterator, List, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
from tqdm import tqdm

from src.exceptions import ParseError

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

PathLike = Union[str, os.PathLike]


def chunk_ranges(total: int, chunk_size: int) -> List[Tuple[int, int]]:
    """Split ``range(total)`` into consecutive ``(start, stop)`` pairs."""
    chunk_size = max(1, int(chunk_size))
    return [(start, min(start + chunk_size, total)) for start in range(0, total, chunk_size)]


def parallel_map(
    fn: Callable[[T], R],
    items: Sequence[T],
    workers: int = 1,
    desc: Optional[str] = None,
    progress: bool = False,
) -> List[R]:
    """Apply ``fn`` to every item, results in submission order.

    With ``workers <= 1`` the items are processed serially in the calling thread.
    """
    items = list(items)
    bar = tqdm(total=len(items), desc=desc, disable=not progress, leave=False)
    try:
        if workers <= 1 or len(items) <= 1:
            results = []
            for item in items:
                results.append(fn(item))
                bar.update(1)
            return results

        with ThreadPoolExecutor(max_workers=workers) as executor:
            futures = [executor.submit(fn, item) for item in items]
            results = []
            for future in futures:
                results.append(future.result())
                bar.update(1)
            return results
    finally:
        bar.close()


def write_json(path: PathLike, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=False)
        f.write("\n")
    return path


def read_json(path: PathLike) -> Any:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON in {path}: {e.msg}", offset=e.pos) from e


def write_raw(path: PathLike, array: np.ndarray, dtype: str) -> Path:
    """Write ``array`` as raw little-endian values of ``dtype`` in C order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(array, dtype=np.dtype(dtype).newbyteorder("<")).tofile(path)
    return path


def read_raw(path: PathLike, dtype: str, count: int) -> np.ndarray:
    path = Path(path)
    item = np.dtype(dtype).newbyteorder("<")
    size = path.stat().st_size
    expected = count * item.itemsize
    if size != expected:
        raise ParseError(
            f"{path.name}: expected {expected} bytes ({count} values), found {size}",
            offset=min(size, expected),
        )
    return np.fromfile(path, dtype=item, count=count).astype(np.dtype(dtype).newbyteorder("="))


class StageOutputs:
    """Tracks files written by a stage so they can be removed on failure."""

    def __init__(self, run_dir: PathLike):
        self.run_dir = Path(run_dir)
        self.paths: List[Path] = []

    def path(self, name: str) -> Path:
        p = self.run_dir / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.paths.append(p)
        return p

    def remove(self):
        for p in reversed(self.paths):
            try:
                if p.is_file():
                    p.unlink()
            except OSError as e:
                logger.warning(f"Could not remove partial output {p}: {e}")


@contextmanager
def stage_outputs(run_dir: PathLike) -> Iterator[StageOutputs]:
    outputs = StageOutputs(run_dir)
    try:
        yield outputs
    except BaseException:
        logger.error(f"Stage failed, removing {len(outputs.paths)} partial output(s)")
        outputs.remove()
        raise
