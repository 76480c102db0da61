"""
meshseed command line.

    python meshseed.py pipeline --config config/pipeline.yaml -o runs/sphere128
    python meshseed.py seed -o runs/sphere128 --set filter.alpha_limit=0.01
    python meshseed.py sweep -o runs/sphere --resolutions 64 128 256
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from performance_config import add_log_file, resolve_worker_count, setup_logging
from src.configuration_meshseed import DEFAULT_CONFIG_PATH, load_config
from src.constants import EXIT_FAILURE, EXIT_OK, LOG_FILE
from src.exceptions import MeshSeedError
from src.pipeline import PIPELINE_ORDER, run_pipeline, run_stage, run_sweep

logger = logging.getLogger("meshseed")

STAGE_HELP = {
    "phantom": "validate the phantom and write phantom.json",
    "project": "simulate cone-beam projections",
    "edges": "Canny edge maps of every projection",
    "seed": "backproject edges, threshold counts, extract and filter the point cloud",
    "mesh": "Delaunay tetrahedralization of the cloud",
    "eval": "cloud quality against the phantom surface and mesh compression",
    "recon": "mesh-adapted SART reconstruction",
    "pipeline": "every stage in order",
    "sweep": "seed, mesh and evaluate over several grid resolutions",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None,
                        help=f"YAML or JSON config (default: {DEFAULT_CONFIG_PATH.name} when present)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="BLOCK.KEY=VALUE",
                        help="config override, repeatable")
    common.add_argument("-o", "--run-dir", type=str, default=None, help="run directory (overrides output_dir)")
    common.add_argument("--threads", type=int, default=None, help="worker cap")
    common.add_argument("--log-level", type=str, default=None)
    common.add_argument("--progress", action="store_true", help="show progress bars")

    parser = argparse.ArgumentParser(prog="meshseed", description="Adaptive tetrahedral sampling from cone-beam projections")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in STAGE_HELP.items():
        p = sub.add_parser(name, parents=[common], help=text)
        if name == "sweep":
            p.add_argument("--resolutions", type=int, nargs="+", default=[64, 128, 256])
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        config_path = args.config
        if config_path is None and DEFAULT_CONFIG_PATH.is_file():
            config_path = DEFAULT_CONFIG_PATH
        cfg = load_config(config_path, args.overrides)
        if args.run_dir:
            cfg.output_dir = args.run_dir
        workers = resolve_worker_count(args.threads, cfg.threads)
        run_dir = Path(cfg.output_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        add_log_file(run_dir / LOG_FILE)
        logger.info(f"meshseed {args.command}: run dir {run_dir}, {workers} worker(s)")

        if args.command == "pipeline":
            run_pipeline(cfg, run_dir, workers=workers, progress=args.progress, stages=PIPELINE_ORDER)
        elif args.command == "sweep":
            run_sweep(cfg, run_dir, args.resolutions, workers=workers, progress=args.progress)
        else:
            run_stage(args.command, cfg, run_dir, workers=workers, progress=args.progress)
    except MeshSeedError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except Exception:
        logger.exception("Unexpected failure")
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
