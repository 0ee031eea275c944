import json

import pytest

from obstacle_forge.config import ConfigError, PipelineConfig


def test_defaults_validate_and_round_trip():
    cfg = PipelineConfig.load()
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.dbscan.eps == 0.8 and cfg.dbscan.min_pts == 5
    assert cfg.track.gate_m == 2.0 and cfg.track.min_lifetime == 5
    assert cfg.fuse.merge_dist_m == 1.0 and cfg.fuse.max_extent_m == 6.0
    assert cfg.maskproc.min_area_px == 9 and cfg.maskproc.max_area_px is None


def test_partial_override(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"dbscan": {"eps": 0.5}, "anomaly": {"residual_m": 0.2}}))
    cfg = PipelineConfig.load(path)
    assert cfg.dbscan.eps == 0.5 and cfg.dbscan.min_pts == 5 and cfg.anomaly.residual_m == 0.2


@pytest.mark.parametrize("doc", [
    {"dbscan": {"epsilon": 1}},
    {"tracking": {}},
    {"dbscan": {"eps": -1}},
    {"dbscan": {"min_pts": 2.5}},
    {"dbscan": {"eps": "big"}},
    {"ground": {"max_tilt_deg": 95}},
    {"fuse": {"overlap_frac": 1.5}},
    {"track": {"significance": 1.0}},
    {"track": {"min_normal_cos": 1.5}},
    {"fuse": {"min_support_frames": 0}},
    {"gicp": []},
    [],
])
def test_invalid_configs(doc):
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict(doc)


def test_malformed_json(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="c.json"):
        PipelineConfig.load(path)
