import csv

import numpy as np
import pytest

from src.configuration_meshseed import load_config
from src.constants import (
    CLOUD_PLY_FILE,
    COUNTS_FILE,
    COUNTS_HEADER_FILE,
    DECISIONS_FILE,
    DIAGNOSTIC_FILE,
    EDGES_DIR,
    MANIFEST_FILE,
    MESH_VTK_FILE,
    QUALITY_FILE,
    RECON_VTK_FILE,
    RESIDUALS_FILE,
    SWEEP_CSV_FILE,
)
from src.exceptions import EmptyCloudError, StageMismatchError
from src.mesh_io import read_vtk
from src.pipeline import PIPELINE_ORDER, build_phantom, run_pipeline, run_stage, run_sweep, table_row
from src.point_cloud import read_ply
from src.utils import read_json

SMALL = [
    "phantom.builtin=sphere",
    "phantom.scale_mm=12",
    "geometry.num_projections=24",
    "geometry.sod_mm=200",
    "geometry.sdd_mm=400",
    "geometry.detector_px=[64,64]",
    "geometry.pixel_pitch_mm=[1.0,1.0]",
    "grid.dims=[24,24,24]",
    "grid.extent_mm=40",
    "filter.alpha_limit=0.1",
    "mesh.method=qhull",
    "recon.sweeps=2",
    "recon.ray_stride=4",
    "threads=1",
]


@pytest.fixture
def small_cfg():
    return load_config(None, SMALL)


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("pipeline")
    summaries = run_pipeline(load_config(None, SMALL), run_dir)
    return run_dir, summaries


def test_pipeline_writes_every_stage(finished_run):
    run_dir, summaries = finished_run
    assert list(summaries) == list(PIPELINE_ORDER)
    for name in (COUNTS_FILE, DECISIONS_FILE, CLOUD_PLY_FILE, MESH_VTK_FILE, QUALITY_FILE, RECON_VTK_FILE,
                 RESIDUALS_FILE, MANIFEST_FILE):
        assert (run_dir / name).is_file(), name
    assert len(list((run_dir / EDGES_DIR).glob("edge_*.pbm"))) == 24
    assert not (run_dir / DIAGNOSTIC_FILE).exists()


def test_pipeline_summaries_are_consistent(finished_run):
    run_dir, summaries = finished_run
    cloud = read_ply(run_dir / CLOUD_PLY_FILE)
    mesh, _ = read_vtk(run_dir / MESH_VTK_FILE)
    assert summaries["seed"]["cloud_points"] == len(cloud) <= summaries["seed"]["selected_points"]
    assert 0 < summaries["seed"]["crest_voxels"] < summaries["seed"]["non_null_voxels"]
    assert read_json(run_dir / DECISIONS_FILE)["parameters"]["ridge_thinning"] is True
    assert summaries["mesh"]["cell_count"] == mesh.num_cells
    assert summaries["mesh"]["ratio_mesh_voxel"] == pytest.approx(mesh.num_cells / 24 ** 3)
    assert summaries["eval"]["num_points"] == len(cloud)
    assert summaries["recon"]["residual_final"] <= summaries["recon"]["residual_initial"]
    mesh.validate()


def test_manifest_records_config_and_timings(finished_run):
    run_dir, _ = finished_run
    manifest = read_json(run_dir / MANIFEST_FILE)
    assert manifest["config"]["grid"]["dims"] == [24, 24, 24]
    assert manifest["effective"]["alpha_limit"] == 0.1
    assert manifest["effective"]["workers"] == 1
    assert set(manifest["stages"]) == set(PIPELINE_ORDER)
    assert set(manifest["timings_s"]) == set(PIPELINE_ORDER)
    assert manifest["table"]["grid"] == "24x24x24"
    assert "cpu_logical" in manifest["system"]


def test_quality_report_fields(finished_run):
    run_dir, _ = finished_run
    report = read_json(run_dir / QUALITY_FILE)
    assert report["grid_dims"] == [24, 24, 24]
    assert report["tolerance_mm"] == pytest.approx(40.0 / 24 * np.sqrt(3.0) / 2.0)
    assert 0.0 <= report["optimum_fraction"] <= 1.0
    num, den = map(int, report["ratio_exact"].split("/"))
    assert num / den == pytest.approx(report["ratio_mesh_voxel"])


def test_staged_run_matches_pipeline(finished_run, small_cfg, run_dir):
    reference, _ = finished_run
    for name in PIPELINE_ORDER:
        run_stage(name, small_cfg, run_dir)
    for name in (COUNTS_FILE, DECISIONS_FILE, CLOUD_PLY_FILE, MESH_VTK_FILE, RECON_VTK_FILE):
        assert (run_dir / name).read_bytes() == (reference / name).read_bytes(), name


def test_stage_inputs_must_exist(small_cfg, run_dir):
    with pytest.raises(StageMismatchError):
        run_stage("seed", small_cfg, run_dir)
    with pytest.raises(StageMismatchError):
        run_stage("mesh", small_cfg, run_dir)
    with pytest.raises(StageMismatchError):
        run_stage("recon", small_cfg, run_dir)


def test_grid_change_between_stages_is_rejected(finished_run, run_dir):
    reference, _ = finished_run
    for name in (CLOUD_PLY_FILE, COUNTS_HEADER_FILE):
        (run_dir / name).write_bytes((reference / name).read_bytes())
    other = load_config(None, SMALL + ["grid.dims=[20,20,20]"])
    with pytest.raises(StageMismatchError) as info:
        run_stage("mesh", other, run_dir)
    assert info.value.field == "grid.dims"


def test_empty_cloud_stops_with_a_diagnostic(run_dir):
    cfg = load_config(None, SMALL + ["phantom.attenuation=0.0"])
    with pytest.raises(EmptyCloudError):
        run_pipeline(cfg, run_dir)
    diagnostic = read_json(run_dir / DIAGNOSTIC_FILE)
    assert diagnostic["status"] == "empty_cloud"
    assert diagnostic["stage"] == "seed"
    assert diagnostic["edge_pixels"] == 0
    assert diagnostic["cloud_points"] == 0
    assert not (run_dir / MESH_VTK_FILE).exists()
    manifest = read_json(run_dir / MANIFEST_FILE)
    assert set(manifest["stages"]) == {"phantom", "project", "edges"}


def test_seeding_without_ridge_thinning_keeps_every_voxel(run_dir):
    cfg = load_config(None, SMALL + ["filter.ridge_thinning=false"])
    summaries = run_pipeline(cfg, run_dir, stages=("phantom", "project", "edges", "seed"))
    seed = summaries["seed"]
    assert seed["crest_voxels"] == seed["non_null_voxels"] > 0
    assert read_json(run_dir / DECISIONS_FILE)["parameters"]["ridge_thinning"] is False


def test_phantom_family_override(small_cfg):
    assert build_phantom(small_cfg).family == "sphere"
    small_cfg.phantom.family = "cone"
    assert build_phantom(small_cfg).family == "cone"


def test_table_row():
    row = table_row([128, 128, 128], 18950, 128 ** 3, 4.0)
    assert row == {"grid": "128x128x128", "mesh_cells": 18950, "ratio_mesh_voxel": "0.9%", "total_computation_s": 4.0}


def test_resolution_sweep(small_cfg, run_dir):
    rows = run_sweep(small_cfg, run_dir, [16, 24])
    assert [r["grid"] for r in rows] == ["16x16x16", "24x24x24"]
    assert all(r["status"] in ("ok", "empty_cloud") for r in rows)
    assert (run_dir / "grid_16" / COUNTS_FILE).is_file()
    with open(run_dir / SWEEP_CSV_FILE, newline="") as f:
        table = list(csv.DictReader(f))
    assert len(table) == 2
    assert table[1]["grid_res_mm"] == str(40.0 / 24)
    assert "sweep" in read_json(run_dir / MANIFEST_FILE)
