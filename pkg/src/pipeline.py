"""
Pipeline stages.

Every stage reads its inputs from the run directory and writes its outputs
back into it; ``run_pipeline`` chains the stages through those same files.
A failing stage removes the files it has written so far.
"""

import csv
import dataclasses
import logging
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence, Union

import numpy as np

from performance_config import StageTimer, get_process_memory_mb, get_system_info
from src.acquisition_geometry import AcquisitionGeometry, make_circular_geometry
from src.backprojection import GridSpec, backproject_edge_maps, suppress_non_maxima
from src.configuration_meshseed import PipelineConfig, config_to_dict, effective_alpha
from src.constants import (
    CLOUD_PLY_FILE,
    CLOUD_XYZ_FILE,
    COUNTS_FILE,
    COUNTS_HEADER_FILE,
    DECISIONS_FILE,
    DIAGNOSTIC_FILE,
    DISTANCES_FILE,
    EDGE_FILE_PATTERN,
    EDGES_DIR,
    GEOMETRY_FILE,
    HISTOGRAM_FILE,
    MANIFEST_FILE,
    MESH_MEDIT_FILE,
    MESH_VTK_FILE,
    PHANTOM_FILE,
    PROJECTIONS_FILE,
    QUALITY_FILE,
    RECON_VTK_FILE,
    RESIDUALS_FILE,
    SWEEP_CSV_FILE,
    SWEEP_JSON_FILE,
)
from src.count_statistics import CountModel, select_model_and_threshold, write_decision_report
from src.edge_detection import CannyParams, detect_edges, load_edge_maps, write_pbm
from src.exceptions import EmptyCloudError, GeometryIntegrityError, StageMismatchError
from src.mesh_io import read_vtk, write_medit, write_vtk
from src.mesh_sart import sart_reconstruct, write_residuals_csv
from src.phantom_models import Phantom, ProjectionSet, builtin_phantom, simulate_projections
from src.point_cloud import extract_points, knn_outlier_removal, read_ply, write_ply, write_xyz
from src.sampling_quality import (
    cloud_quality,
    compression_ratio,
    interface_density_ratio,
    write_distances_csv,
    write_histogram,
    write_quality_report,
)
from src.stl_mesh import load_stl
from src.tetrahedralization import mesh_stats, tetrahedralize
from src.utils import read_json, stage_outputs, write_json

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

PIPELINE_ORDER = ("phantom", "project", "edges", "seed", "mesh", "eval", "recon")


def build_phantom(cfg: PipelineConfig) -> Phantom:
    pc = cfg.phantom
    if pc.spec_path:
        phantom = Phantom.load(pc.spec_path)
    elif pc.stl_path:
        path = Path(pc.stl_path).resolve()
        phantom = Phantom(
            mesh=load_stl(path),
            mesh_attenuation=pc.stl_attenuation,
            name=path.stem,
            family="default",
            mesh_path=str(path),
        )
    else:
        phantom = builtin_phantom(pc.builtin, scale_mm=pc.scale_mm, attenuation=pc.attenuation)
    if pc.family:
        phantom.family = pc.family
    if not phantom.watertight:
        raise GeometryIntegrityError(f"phantom {phantom.name or '<mesh>'}: triangle mesh is not watertight")
    return phantom


def build_geometry(cfg: PipelineConfig) -> AcquisitionGeometry:
    g = cfg.geometry
    return make_circular_geometry(g.num_projections, g.sod_mm, g.sdd_mm, g.detector_px, g.pixel_pitch_mm)


def build_grid(cfg: PipelineConfig) -> GridSpec:
    return GridSpec.centered(cfg.grid.dims, cfg.grid.extent_mm)


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise StageMismatchError(f"{stage} input {path.name}", "an existing file", "nothing")
    return path


def _load_grid(run_dir: Path, cfg: PipelineConfig) -> GridSpec:
    """Grid of the count header, checked against the configured grid."""
    header = read_json(_require(run_dir / COUNTS_HEADER_FILE, "grid"))
    grid = GridSpec.from_dict(header)
    if list(grid.dims) != list(cfg.grid.dims):
        raise StageMismatchError("grid.dims", list(cfg.grid.dims), list(grid.dims))
    return grid


def _phantom_family(cfg: PipelineConfig, source: Path) -> str:
    if cfg.phantom.family:
        return cfg.phantom.family
    path = source / PHANTOM_FILE
    if path.is_file():
        return str(read_json(path).get("family", "default"))
    return "default"


# Stages

def run_phantom(cfg: PipelineConfig, run_dir: Path, workers: int = 1, progress: bool = False) -> dict:
    phantom = build_phantom(cfg)
    with stage_outputs(run_dir) as out:
        phantom.save(out.path(PHANTOM_FILE))
    logger.info(f"Phantom {phantom.name!r} ({phantom.family}): {len(phantom.primitives)} primitive(s)"
                + (f", STL with {phantom.mesh.num_triangles} triangles" if phantom.mesh is not None else ""))
    return {"name": phantom.name, "family": phantom.family, "primitives": len(phantom.primitives)}


def run_project(cfg: PipelineConfig, run_dir: Path, workers: int = 1, progress: bool = False) -> dict:
    phantom = Phantom.load(_require(run_dir / PHANTOM_FILE, "project"))
    geom = build_geometry(cfg)
    with stage_outputs(run_dir) as out:
        projections = simulate_projections(phantom, geom, workers=workers, progress=progress)
        projections.save(out.path(PROJECTIONS_FILE), out.path(GEOMETRY_FILE))
    return {
        "num_projections": geom.num_projections,
        "detector_px": [geom.nu, geom.nv],
        "max_line_integral": float(projections.images.max()),
    }


def run_edges(cfg: PipelineConfig, run_dir: Path, workers: int = 1, progress: bool = False) -> dict:
    projections = ProjectionSet.load(
        _require(run_dir / PROJECTIONS_FILE, "edges"), _require(run_dir / GEOMETRY_FILE, "edges")
    )
    c = cfg.canny
    params = CannyParams(c.gaussian_sigma, c.high_percentile, c.low_ratio, c.low, c.high)
    maps = detect_edges(list(projections.images), params, workers=workers)
    with stage_outputs(run_dir) as out:
        for stale in sorted((run_dir / EDGES_DIR).glob("edge_*.pbm")):
            stale.unlink()
        for k, edge_map in enumerate(maps):
            write_pbm(out.path(f"{EDGES_DIR}/{EDGE_FILE_PATTERN.format(index=k)}"), edge_map)
    return {"maps": len(maps), "edge_pixels": int(sum(m.edge_count for m in maps))}


def run_seed(cfg: PipelineConfig, run_dir: Path, workers: int = 1, progress: bool = False,
             source_dir: Optional[Path] = None) -> dict:
    """Backprojection, per-slice thresholding, point extraction and outlier removal."""
    source = Path(source_dir or run_dir)
    geom = AcquisitionGeometry.load(_require(source / GEOMETRY_FILE, "seed"))
    maps = load_edge_maps(_require(source / EDGES_DIR, "seed"))
    if len(maps) != geom.num_projections:
        raise StageMismatchError("edge map count (geometry.num_projections)", geom.num_projections, len(maps))
    grid = build_grid(cfg)
    family = _phantom_family(cfg, source)
    alpha = effective_alpha(cfg, family, max(grid.dims))
    f = cfg.filter
    parameters = {
        "alpha_limit": alpha,
        "alpha_test": f.alpha_test,
        "per_slice": f.per_slice,
        "quantile_method": f.quantile_method,
        "use_non_null_only": f.use_non_null_only,
        "estimator": f.estimator,
        "saturation": f.saturation,
        "ridge_thinning": f.ridge_thinning,
        "family": family,
    }
    logger.info(f"Seeding on {'x'.join(map(str, grid.dims))} voxels, alpha={alpha} ({family})")

    with stage_outputs(run_dir) as out:
        volume = backproject_edge_maps(maps, geom, grid, saturate=f.saturation, workers=workers, progress=progress)
        volume.save(out.path(COUNTS_FILE), out.path(COUNTS_HEADER_FILE))
        non_null = int(np.count_nonzero(volume.counts))
        if f.ridge_thinning:
            volume = suppress_non_maxima(volume)
        decisions = select_model_and_threshold(
            volume,
            alpha,
            alpha_test=f.alpha_test,
            per_slice=f.per_slice,
            quantile_method=f.quantile_method,
            use_non_null_only=f.use_non_null_only,
            estimator=f.estimator,
            workers=workers,
        )
        write_decision_report(out.path(DECISIONS_FILE), decisions, parameters)
        raw = extract_points(volume, decisions)
        cloud = knn_outlier_removal(raw, cfg.cloud.k, cfg.cloud.multiplier, workers=workers)
        write_ply(out.path(CLOUD_PLY_FILE), cloud)
        write_xyz(out.path(CLOUD_XYZ_FILE), cloud)

    summary = {
        "alpha_limit": alpha,
        "non_null_voxels": non_null,
        "crest_voxels": int(np.count_nonzero(volume.counts)),
        "max_count": int(volume.counts.max()),
        "poisson_slices": sum(d.model is CountModel.POISSON for d in decisions),
        "inherited_slices": sum(d.inherited for d in decisions),
        "selected_points": len(raw),
        "cloud_points": len(cloud),
        "warnings": list(cloud.warnings),
    }
    diagnostic = run_dir / DIAGNOSTIC_FILE
    if cloud.is_empty:
        write_json(diagnostic, {
            "status": "empty_cloud",
            "stage": "seed",
            "reason": cloud.warnings[0] if cloud.warnings else "no points selected",
            "edge_pixels": int(sum(m.edge_count for m in maps)),
            **summary,
        })
        raise EmptyCloudError(f"seeding produced an empty point cloud; see {diagnostic}")
    if diagnostic.exists():
        diagnostic.unlink()
    return summary


def run_mesh(cfg: PipelineConfig, run_dir: Path, workers: int = 1, progress: bool = False) -> dict:
    cloud = read_ply(_require(run_dir / CLOUD_PLY_FILE, "mesh"))
    if cloud.is_empty:
        raise EmptyCloudError(f"{CLOUD_PLY_FILE} holds no points; nothing to mesh")
    grid = _load_grid(run_dir, cfg)
    mesh = tetrahedralize(cloud, seed=cfg.seed, method=cfg.mesh.method, progress=progress)
    with stage_outputs(run_dir) as out:
        write_vtk(out.path(MESH_VTK_FILE), mesh)
        write_medit(out.path(MESH_MEDIT_FILE), mesh)
    ratio = compression_ratio(mesh, grid)
    summary = mesh_stats(mesh).to_dict()
    summary.update({
        "dropped_slivers": mesh.dropped_slivers,
        "num_voxels": grid.num_voxels,
        "ratio_mesh_voxel": float(ratio),
    })
    logger.info(f"Mesh: {mesh.num_cells} cells, {float(ratio):.2%} of {grid.num_voxels} voxels")
    return summary


def run_eval(cfg: PipelineConfig, run_dir: Path, workers: int = 1, progress: bool = False,
             source_dir: Optional[Path] = None) -> dict:
    source = Path(source_dir or run_dir)
    phantom = Phantom.load(_require(source / PHANTOM_FILE, "eval"))
    cloud = read_ply(_require(run_dir / CLOUD_PLY_FILE, "eval"))
    grid = _load_grid(run_dir, cfg)
    report = cloud_quality(cloud, phantom, grid.resolution, workers=workers)
    extra = {"grid_dims": list(grid.dims), "num_voxels": grid.num_voxels}
    mesh_path = run_dir / MESH_VTK_FILE
    if mesh_path.is_file():
        mesh, _ = read_vtk(mesh_path)
        ratio = compression_ratio(mesh, grid)
        extra.update({
            "mesh_cells": mesh.num_cells,
            "ratio_mesh_voxel": float(ratio),
            "ratio_exact": f"{ratio.numerator}/{ratio.denominator}",
            "interface_density_ratio": interface_density_ratio(mesh, phantom, grid.resolution, workers=workers),
        })
    with stage_outputs(run_dir) as out:
        write_quality_report(out.path(QUALITY_FILE), report, extra)
        write_distances_csv(out.path(DISTANCES_FILE), cloud, report)
        write_histogram(out.path(HISTOGRAM_FILE), report)
    summary = {k: v for k, v in report.to_dict().items() if k != "flags"}
    summary.update(extra)
    return summary


def run_recon(cfg: PipelineConfig, run_dir: Path, workers: int = 1, progress: bool = False) -> dict:
    mesh, _ = read_vtk(_require(run_dir / MESH_VTK_FILE, "recon"))
    data = ProjectionSet.load(_require(run_dir / PROJECTIONS_FILE, "recon"), _require(run_dir / GEOMETRY_FILE, "recon"))
    r = cfg.recon
    result = sart_reconstruct(
        mesh, data, relax=r.relax, sweeps=r.sweeps, init=r.init, nonnegative=r.nonnegative,
        ray_stride=r.ray_stride, workers=workers, progress=progress,
    )
    untouched = result.field.untouched
    with stage_outputs(run_dir) as out:
        write_vtk(out.path(RECON_VTK_FILE), mesh, cell_data={
            "attenuation": result.field.values,
            "untouched": untouched.astype(np.int64),
        }, title="meshseed SART reconstruction")
        write_residuals_csv(out.path(RESIDUALS_FILE), result)
    return {
        "sweeps": r.sweeps,
        "relax": r.relax,
        "untouched_cells": int(untouched.sum()),
        "residual_initial": result.residuals[0],
        "residual_final": result.residuals[-1],
    }


STAGES: Dict[str, Callable[..., dict]] = {
    "phantom": run_phantom,
    "project": run_project,
    "edges": run_edges,
    "seed": run_seed,
    "mesh": run_mesh,
    "eval": run_eval,
    "recon": run_recon,
}


# Manifest

def update_manifest(run_dir: Path, cfg: PipelineConfig, workers: int, stages: Optional[Dict[str, dict]] = None,
                    extra: Optional[dict] = None) -> Path:
    path = run_dir / MANIFEST_FILE
    manifest = read_json(path) if path.is_file() else {}
    manifest["config"] = config_to_dict(cfg)
    effective = manifest.setdefault("effective", {})
    effective.update({"workers": workers, "seed": cfg.seed, "output_dir": str(run_dir)})
    for name, summary in (stages or {}).items():
        manifest.setdefault("stages", {})[name] = summary
        if "alpha_limit" in summary:
            effective["alpha_limit"] = summary["alpha_limit"]
    if extra:
        manifest.update(extra)
    manifest["system"] = get_system_info()
    return write_json(path, manifest)


def run_stage(name: str, cfg: PipelineConfig, run_dir: PathLike, workers: int = 1, progress: bool = False,
              timer: Optional[StageTimer] = None) -> dict:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    timer = timer or StageTimer()
    with timer.measure(name):
        summary = STAGES[name](cfg, run_dir, workers=workers, progress=progress)
    summary["seconds"] = timer.get_stats(name)["total"]
    summary["rss_mb"] = get_process_memory_mb()
    update_manifest(run_dir, cfg, workers, stages={name: summary})
    return summary


def table_row(grid_dims: Sequence[int], cells: int, num_voxels: int, seconds: float) -> dict:
    """One column of the compression table: grid, cells, mesh/voxel ratio, total computation time."""
    return {
        "grid": "x".join(str(n) for n in grid_dims),
        "mesh_cells": int(cells),
        "ratio_mesh_voxel": f"{100.0 * cells / num_voxels:.1f}%",
        "total_computation_s": round(float(seconds), 3),
    }


def run_pipeline(cfg: PipelineConfig, run_dir: PathLike, workers: int = 1, progress: bool = False,
                 stages: Sequence[str] = PIPELINE_ORDER) -> dict:
    run_dir = Path(run_dir)
    timer = StageTimer()
    summaries = {}
    for name in stages:
        summaries[name] = run_stage(name, cfg, run_dir, workers=workers, progress=progress, timer=timer)
    timings = {name: timer.get_stats(name)["total"] for name in stages}
    extra = {"timings_s": timings, "total_s": timer.total()}
    if "mesh" in summaries:
        m = summaries["mesh"]
        extra["table"] = table_row(cfg.grid.dims, m["cell_count"], m["num_voxels"], timer.total())
    update_manifest(run_dir, cfg, workers, extra=extra)
    logger.info(f"Pipeline finished in {timer.total():.2f} s: {run_dir / MANIFEST_FILE}")
    return summaries


# Resolution sweep

SWEEP_COLUMNS = ("grid", "grid_res_mm", "alpha_limit", "cloud_points", "mesh_cells", "ratio_mesh_voxel",
                 "optimum_fraction", "total_computation_s", "status")


def run_sweep(cfg: PipelineConfig, run_dir: PathLike, resolutions: Sequence[int], workers: int = 1,
              progress: bool = False) -> list:
    """Seed, mesh and evaluate every grid edge in ``resolutions`` against one projection set."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    for name in ("phantom", "project", "edges"):
        produced = {"phantom": PHANTOM_FILE, "project": PROJECTIONS_FILE, "edges": EDGES_DIR}[name]
        if not (run_dir / produced).exists():
            run_stage(name, cfg, run_dir, workers=workers, progress=progress)

    rows = []
    for edge in resolutions:
        sub_cfg = dataclasses.replace(cfg, grid=dataclasses.replace(cfg.grid, dims=[int(edge)] * 3))
        sub_dir = run_dir / f"grid_{int(edge)}"
        sub_dir.mkdir(parents=True, exist_ok=True)
        timer = StageTimer()
        row = {"grid": f"{edge}x{edge}x{edge}", "grid_res_mm": cfg.grid.extent_mm / edge, "status": "ok"}
        try:
            with timer.measure(f"seed@{edge}"):
                seed = run_seed(sub_cfg, sub_dir, workers=workers, progress=progress, source_dir=run_dir)
            with timer.measure(f"mesh@{edge}"):
                mesh = run_mesh(sub_cfg, sub_dir, workers=workers, progress=progress)
            evaluation = run_eval(sub_cfg, sub_dir, workers=workers, source_dir=run_dir)
            row.update({
                "alpha_limit": seed["alpha_limit"],
                "cloud_points": seed["cloud_points"],
                "mesh_cells": mesh["cell_count"],
                "ratio_mesh_voxel": mesh["ratio_mesh_voxel"],
                "optimum_fraction": evaluation["optimum_fraction"],
            })
        except EmptyCloudError as e:
            logger.warning(f"Sweep at {edge}^3: {e}")
            row.update({"cloud_points": 0, "mesh_cells": 0, "status": "empty_cloud"})
        row["total_computation_s"] = timer.total()
        rows.append(row)
        logger.info(f"Sweep {row['grid']}: {row.get('mesh_cells', 0)} cells in {row['total_computation_s']:.2f} s")

    write_json(run_dir / SWEEP_JSON_FILE, {"resolutions": list(resolutions), "rows": rows})
    with open(run_dir / SWEEP_CSV_FILE, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in SWEEP_COLUMNS})
    update_manifest(run_dir, cfg, workers, extra={"sweep": rows})
    return rows
