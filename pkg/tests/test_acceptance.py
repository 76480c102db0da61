"""
Desk-scale end-to-end scenarios. The heavy ones are marked ``slow``;
deselect them with ``-m "not slow"``.
"""

import numpy as np
import pytest
from scipy.spatial import ConvexHull

from src.acquisition_geometry import make_circular_geometry
from src.configuration_meshseed import load_config
from src.constants import CLOUD_PLY_FILE, GEOMETRY_FILE, MANIFEST_FILE, MESH_VTK_FILE, PROJECTIONS_FILE, QUALITY_FILE
from src.mesh_io import read_vtk
from src.mesh_sart import CellField, forward_project, sart_reconstruct
from src.phantom_models import ProjectionSet, sphere_phantom
from src.pipeline import run_pipeline
from src.point_cloud import read_ply
from src.predicates import circumcenter, in_sphere, orient3d
from src.tetrahedralization import TetMesh, tetrahedralize
from src.utils import read_json
from test_predicates import as_tuple, exact_inside, exact_orient

SEED_STAGES = ("phantom", "project", "edges", "seed", "mesh", "eval")


def sphere_run(tmp_path_factory, sigma=1.4):
    run_dir = tmp_path_factory.mktemp(f"sphere_sigma{sigma}")
    cfg = load_config(None, ["phantom.builtin=sphere", "grid.dims=[128,128,128]", "filter.alpha_limit=0.05",
                             f"canny.gaussian_sigma={sigma}"])
    run_pipeline(cfg, run_dir, stages=SEED_STAGES)
    return run_dir


@pytest.fixture(scope="module")
def sphere_dir(tmp_path_factory):
    return sphere_run(tmp_path_factory)


@pytest.mark.slow
def test_sphere_compression(sphere_dir):
    manifest = read_json(sphere_dir / MANIFEST_FILE)
    mesh = manifest["stages"]["mesh"]
    assert mesh["cell_count"] >= 1000
    assert mesh["cell_count"] / 128 ** 3 <= 0.03
    assert manifest["total_s"] <= 60.0


@pytest.mark.slow
def test_sphere_point_selection_quality(sphere_dir):
    report = read_json(sphere_dir / QUALITY_FILE)
    assert report["tolerance_mm"] == pytest.approx(100.0 / 128 * np.sqrt(3.0) / 2.0)
    assert report["optimum_fraction"] >= 0.85


@pytest.mark.slow
@pytest.mark.parametrize("sigma", [0.7, 2.1])
def test_sphere_scenario_survives_smoothing_changes(tmp_path_factory, sigma):
    run_dir = sphere_run(tmp_path_factory, sigma)
    manifest = read_json(run_dir / MANIFEST_FILE)
    assert 1000 <= manifest["stages"]["mesh"]["cell_count"] <= 0.03 * 128 ** 3
    assert read_json(run_dir / QUALITY_FILE)["optimum_fraction"] >= 0.85


@pytest.mark.slow
def test_shepp_logan_compression_and_interface_density(tmp_path):
    cfg = load_config(None, ["phantom.builtin=shepp-logan", "grid.dims=[128,128,128]"])
    run_pipeline(cfg, tmp_path, stages=SEED_STAGES)
    report = read_json(tmp_path / QUALITY_FILE)
    assert report["ratio_mesh_voxel"] <= 0.08
    assert report["interface_density_ratio"] is not None
    assert report["interface_density_ratio"] < 0.5


@pytest.mark.slow
def test_delaunay_suite(rng):
    for trial in range(50):
        n = int(rng.integers(50, 501))
        points = rng.uniform(-10.0, 10.0, size=(n, 3))
        mesh = tetrahedralize(points, seed=trial)
        mesh.validate()
        centers, radii = mesh.circumspheres()
        for center, radius in zip(centers, radii):
            assert np.all(np.linalg.norm(mesh.vertices - center, axis=1) >= radius * (1.0 - 1e-9))
        assert mesh.total_volume() == pytest.approx(ConvexHull(points).volume, rel=1e-9)


@pytest.mark.slow
def test_predicate_fuzzing(rng):
    for _ in range(50_000):
        a, b, c = rng.uniform(-1.0, 1.0, size=(3, 3))
        s, t = rng.uniform(-2.0, 2.0, size=2)
        pts = [as_tuple(p) for p in (a, b, c, a + s * (b - a) + t * (c - a))]
        assert orient3d(*pts) == exact_orient(*pts)
    checked = 0
    while checked < 50_000:
        a, b, c, d = (as_tuple(p) for p in rng.uniform(-1.0, 1.0, size=(4, 3)))
        o = exact_orient(a, b, c, d)
        if o == 0:
            continue
        if o < 0:
            c, d = d, c
        center = np.asarray(circumcenter(a, b, c, d))
        direction = rng.normal(size=3)
        e = as_tuple(center + np.linalg.norm(center - np.array(a)) * direction / np.linalg.norm(direction))
        assert in_sphere(a, b, c, d, e) == exact_inside(a, b, c, d, e)
        checked += 1


@pytest.mark.slow
def test_sart_recovers_known_cube_values(cube_mesh):
    mesh = TetMesh(cube_mesh.vertices * 10.0 - 5.0, cube_mesh.tets)
    truth = np.array([0.010, 0.020, 0.030, 0.015, 0.025])
    geom = make_circular_geometry(60, 100.0, 200.0, (32, 32), (1.0, 1.0))
    data = forward_project(CellField(mesh, truth), geom, workers=2)
    result = sart_reconstruct(mesh, data, relax=1.0, sweeps=100, workers=2)
    rmse = np.sqrt(np.mean((result.field.values - truth) ** 2))
    assert rmse / np.sqrt(np.mean(truth ** 2)) < 0.01
    first = result.residuals[:21]
    assert all(later <= earlier * (1.0 + 1e-9) for earlier, later in zip(first, first[1:]))


@pytest.mark.slow
def test_sart_on_sphere_mesh(sphere_dir):
    mesh, _ = read_vtk(sphere_dir / MESH_VTK_FILE)
    data = ProjectionSet.load(sphere_dir / PROJECTIONS_FILE, sphere_dir / GEOMETRY_FILE)
    result = sart_reconstruct(mesh, data, sweeps=20, ray_stride=4, workers=4)
    assert result.residuals[-1] <= 0.1 * result.residuals[0]
    phantom = sphere_phantom()
    centroids = mesh.centroids()
    interior = (phantom.surface_distances(centroids) > 100.0 / 128) & (np.linalg.norm(centroids, axis=1) < 40.0)
    assert interior.any()
    mean = float(result.field.values[interior].mean())
    assert mean == pytest.approx(0.02, rel=0.10)


def test_identical_runs_are_bit_identical(tmp_path):
    overrides = [
        "phantom.builtin=sphere", "phantom.scale_mm=12", "geometry.num_projections=24",
        "geometry.sod_mm=200", "geometry.sdd_mm=400", "geometry.detector_px=[64,64]",
        "geometry.pixel_pitch_mm=[1.0,1.0]", "grid.dims=[24,24,24]", "grid.extent_mm=40",
        "filter.alpha_limit=0.1", "mesh.method=incremental",
    ]
    dirs = []
    for name in ("a", "b"):
        run_dir = tmp_path / name
        run_pipeline(load_config(None, overrides), run_dir, workers=2, stages=SEED_STAGES)
        dirs.append(run_dir)
    a, b = dirs
    assert (a / CLOUD_PLY_FILE).read_bytes() == (b / CLOUD_PLY_FILE).read_bytes()
    assert read_vtk(a / MESH_VTK_FILE)[0].tet_set() == read_vtk(b / MESH_VTK_FILE)[0].tet_set()
    assert (a / QUALITY_FILE).read_bytes() == (b / QUALITY_FILE).read_bytes()
    assert len(read_ply(a / CLOUD_PLY_FILE)) > 0
