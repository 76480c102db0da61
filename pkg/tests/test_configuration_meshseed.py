import json

import pytest

from src.configuration_meshseed import (
    DEFAULT_CONFIG_PATH,
    PipelineConfig,
    config_to_dict,
    effective_alpha,
    load_config,
)
from src.constants import FALLBACK_ALPHA
from src.exceptions import ConfigurationError


def test_schema_defaults():
    cfg = load_config()
    assert isinstance(cfg, PipelineConfig)
    assert cfg.grid.dims == [128, 128, 128]
    assert cfg.geometry.num_projections == 30
    assert cfg.filter.alpha_limit is None
    assert cfg.mesh.method == "incremental"
    assert cfg.filter.ridge_thinning is True
    assert cfg.filter.alpha_table["cone"]["256"] == 0.001


def test_shipped_yaml_matches_schema_defaults():
    assert config_to_dict(load_config(DEFAULT_CONFIG_PATH)) == config_to_dict(load_config())


def test_file_then_overrides(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"seed": 7, "mesh": {"method": "qhull"}, "grid": {"extent_mm": 80.0}}))
    cfg = load_config(path, ["grid.dims=[64,64,32]", "filter.alpha_limit=0.01", "seed=9"])
    assert cfg.seed == 9
    assert cfg.mesh.method == "qhull"
    assert cfg.grid.extent_mm == 80.0
    assert cfg.grid.dims == [64, 64, 32]
    assert cfg.filter.alpha_limit == 0.01


def test_yaml_layer_extends_alpha_table(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("filter:\n  alpha_table:\n    skull: {\"128\": 0.02}\n")
    cfg = load_config(path)
    assert cfg.filter.alpha_table["skull"] == {"128": 0.02}
    assert "default" in cfg.filter.alpha_table


@pytest.mark.parametrize(
    "overrides",
    [
        ["nonsense.key=1"],
        ["grid.extent_mm=wide"],
        ["grid.dims=[1,4,4]"],
        ["grid.dims=[4,4]"],
        ["grid.extent_mm=0"],
        ["filter.alpha_limit=1.5"],
        ["filter.alpha_test=0"],
        ["filter.quantile_method=approximate"],
        ["filter.estimator=bayes"],
        ["filter.alpha_table.default.huge=0.1"],
        ["cloud.k=0"],
        ["cloud.multiplier=-1"],
        ["mesh.method=tetgen"],
        ["recon.relax=2.0"],
        ["recon.ray_stride=0"],
        ["threads=-1"],
        ["geometry.detector_px=[64]"],
        ["phantom.builtin=null"],
        ["phantom.spec_path=a.json", "phantom.stl_path=b.stl"],
    ],
)
def test_invalid_settings_rejected(overrides):
    with pytest.raises(ConfigurationError):
        load_config(None, overrides)


def test_unreadable_files_rejected(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("grid: [unclosed\n")
    with pytest.raises(ConfigurationError):
        load_config(bad)
    bad.write_text("- just\n- a list\n")
    with pytest.raises(ConfigurationError):
        load_config(bad)
    empty = tmp_path / "empty.yaml"
    empty.write_text("")
    assert load_config(empty).grid.dims == [128, 128, 128]


@pytest.mark.parametrize(
    "family, edge, expected",
    [
        ("default", 128, 0.05),
        ("default", 256, 0.01),
        ("default", 512, 0.001),
        ("cone", 256, 0.001),
        ("sphere", 256, 0.01),
        ("default", 200, 0.01),
        ("default", 64, 0.05),
        # equidistant from 128 and 256: the finer grid wins
        ("default", 192, 0.01),
    ],
)
def test_effective_alpha_table_lookup(family, edge, expected):
    assert effective_alpha(load_config(), family, edge) == expected


def test_effective_alpha_prefers_explicit_limit():
    cfg = load_config(None, ["filter.alpha_limit=0.2", "grid.dims=[256,256,256]"])
    assert effective_alpha(cfg, "cone") == 0.2
    cfg = load_config(None, ["grid.dims=[256,256,256]"])
    assert effective_alpha(cfg, "cone") == 0.001


def test_effective_alpha_falls_back_without_table():
    cfg = load_config()
    cfg.filter.alpha_table = {}
    assert effective_alpha(cfg, "default", 128) == FALLBACK_ALPHA
