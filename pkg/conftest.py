import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from src.acquisition_geometry import make_circular_geometry  # noqa: E402
from src.tetrahedralization import TetMesh, orient_positive  # noqa: E402

# Unit cube split into a central tetrahedron and four corner tetrahedra
CUBE_VERTICES = np.array(
    [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0], [0, 0, 1], [1, 0, 1], [0, 1, 1], [1, 1, 1]],
    dtype=np.float64,
)
CUBE_FIVE_TETS = np.array(
    [[0, 1, 2, 4], [1, 3, 2, 7], [1, 4, 5, 7], [2, 4, 7, 6], [1, 2, 4, 7]],
    dtype=np.int64,
)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_geometry():
    return make_circular_geometry(8, 200.0, 400.0, (48, 40), (1.0, 1.0))


@pytest.fixture
def run_dir(tmp_path):
    d = tmp_path / "run"
    d.mkdir()
    return d


@pytest.fixture
def unit_tet_mesh():
    vertices = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=np.float64)
    return TetMesh(vertices, np.array([[0, 1, 2, 3]]))


@pytest.fixture
def cube_mesh():
    return TetMesh(CUBE_VERTICES.copy(), orient_positive(CUBE_VERTICES, CUBE_FIVE_TETS.copy()))
