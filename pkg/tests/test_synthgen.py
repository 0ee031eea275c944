import json

import numpy as np
import pytest

from obstacle_forge.core import RigidTransform, motion_compensate
from obstacle_forge.dataset import load_dataset
from obstacle_forge.synthgen import (BumpSpec, ObstacleSpec, SceneSpec, benchmark_scene, ground_truth, poses,
                                     render_masks, scan_frame, sensor_offset, terrain_height)


def _spec(**kw):
    base = dict(seed=1, duration=0.5, lidar_hfov_deg=90.0, azimuth_step_deg=0.5, beam_count=32,
                image_width=160, image_height=90, focal_px=100.0,
                obstacles=[ObstacleSpec((15.0, 0.0, 0.5), (1.0, 1.0, 1.0))])
    base.update(kw)
    return SceneSpec(**base)


def test_spec_json_round_trip(tmp_path):
    spec = _spec(bumps=[BumpSpec((5.0, 1.0), 0.5, 0.2)])
    path = tmp_path / "s.json"
    path.write_text(json.dumps(spec.to_dict()))
    assert SceneSpec.from_json(path) == spec


@pytest.mark.parametrize("doc", [{"sead": 1}, {"obstacles": [{"position": [0, 0, 0], "extent": [1, 1, 1],
                                                               "colour": "red"}]}])
def test_spec_rejects_unknown_keys(doc):
    with pytest.raises(ValueError):
        SceneSpec.from_dict(doc)


@pytest.mark.parametrize("kw", [dict(duration=0), dict(noise_sigma=-1), dict(lidar_hfov_deg=400),
                                dict(obstacles=[ObstacleSpec((0, 0, 0), (1, 0, 1))]),
                                dict(obstacles=[ObstacleSpec((0, 0, 0), (1, 1, 1), reflectivity=2)])])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        _spec(**kw).validate()


def test_frame_timing():
    spec = _spec(duration=1.0)
    assert spec.n_frames == 10
    assert spec.frame_time(1) == pytest.approx(0.05)
    assert spec.frame_time(10) == pytest.approx(0.95)


def test_scan_is_deterministic_and_frames_differ():
    spec = _spec()
    a, b = scan_frame(spec, 2), scan_frame(spec, 2)
    assert np.array_equal(a.xyz, b.xyz) and np.array_equal(a.timestamp, b.timestamp)
    assert not np.array_equal(scan_frame(spec, 3).xyz[:50], a.xyz[:50])


def test_noise_free_ground_lies_on_terrain():
    spec = _spec(noise_sigma=0.0, obstacles=[], bumps=[BumpSpec((12.0, 0.0), 1.0, 0.3)])
    cloud = scan_frame(spec, 1)
    tr = poses(spec)
    pts = motion_compensate(cloud, tr, RigidTransform(np.eye(3), sensor_offset(spec)), 0.0)
    world = pts.xyz + tr.at(0.0).translation
    assert np.allclose(world[:, 2], terrain_height(spec, world[:, 0], world[:, 1]), atol=1e-6)


def test_zero_reflectivity_returns_nothing_but_is_masked():
    spec = _spec(obstacles=[ObstacleSpec((15.0, 0.0, 0.5), (1.0, 1.0, 1.0), reflectivity=0.0)])
    cloud = scan_frame(spec, 1)
    assert np.all(cloud.intensity > 0)
    masks = render_masks(spec, 1)
    assert (masks["obstacle_candidate"] == 1).any()
    assert not (masks["road"][masks["obstacle_candidate"] > 0]).any()
    assert not masks["instance"].any()  # general obstacles have no closed-set class


def test_closed_set_obstacle_gets_instance_label():
    spec = _spec(obstacles=[ObstacleSpec((15.0, 0.0, 0.8), (4.0, 1.8, 1.6), cls="car")])
    assert (render_masks(spec, 1)["instance"] == 1).any()


def test_ground_truth_boxes():
    spec = _spec(duration=1.0, obstacles=[ObstacleSpec((15.0, 0.0, 0.5), (2.0, 1.0, 1.0), yaw=0.3,
                                                       velocity=(1.0, 0.5))])
    gt = ground_truth(spec)
    assert [b.frame_index for b in gt] == list(range(1, 11))
    b = gt[4]
    assert (b.l, b.w, b.h) == (2.0, 1.0, 1.0)
    assert b.x == pytest.approx(15.0 + spec.frame_time(5)) and b.v == pytest.approx((1.0, 0.5))


def test_generated_dataset_loads(small_dataset):
    ds = load_dataset(small_dataset, load_gt=True)
    assert ds.cameras[0].width == 384 and len(ds.point_clouds[0]) > 1000


def test_benchmark_scene_shape():
    spec = benchmark_scene(7)
    spec.validate()
    assert spec.duration == 15.0 and spec.lidar_rate == 10.0 and spec.noise_sigma == 0.02
    assert len(spec.obstacles) == 5
    assert all(o.reflectivity >= 0.5 for o in spec.obstacles)
    assert all(o.position[0] - spec.ego_start_x <= 60 for o in spec.obstacles)
    assert benchmark_scene(7) == spec


@pytest.mark.parametrize("seed", range(1, 13))
def test_benchmark_obstacles_on_one_side_are_apart(seed):
    obs = benchmark_scene(seed).obstacles
    for side in (1, -1):
        xs = sorted(o.position[0] for o in obs if np.sign(o.position[1]) == side)
        assert all(b - a >= 4.0 for a, b in zip(xs, xs[1:]))
