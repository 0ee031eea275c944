import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from obstacle_forge.core import PointCloud
from obstacle_forge.ground import (RoadWorldModel, accumulate, cell_residuals, detect_anomalies, segment_ground,
                                   tile_index)
from obstacle_forge.synthgen import BumpSpec


def _road(rng, n=64000, ext=10.0):
    xy = rng.uniform(-ext, ext, (n, 2))
    return xy, 0.01 * xy[:, 0] + 0.002 * xy[:, 0] ** 2 - 0.003 * xy[:, 1] ** 2


def _bump_cells(bump: BumpSpec, cell_m=0.5):
    lo = np.floor((np.array(bump.center) - bump.half_size) / cell_m).astype(int)
    hi = np.ceil((np.array(bump.center) + bump.half_size) / cell_m).astype(int) - 1
    return {(i, j) for i in range(lo[0], hi[0] + 1) for j in range(lo[1], hi[1] + 1)}


def test_quadratic_road_has_no_anomalies():
    xy, z = _road(np.random.default_rng(0))
    pts = np.column_stack([xy, z])
    _, _, fitted, _, res = cell_residuals(pts, 0.5, 2, 5, 0.1)
    assert fitted.all()
    assert np.abs(res).max() < 1e-6
    assert detect_anomalies(pts, 0.15) == []


def test_bump_gives_one_cluster_on_its_cells():
    xy, z = _road(np.random.default_rng(1))
    bump = BumpSpec((0.75, 0.75), 0.75, 0.3)
    pts = np.column_stack([xy, z + bump.profile(xy[:, 0], xy[:, 1])])
    found = detect_anomalies(pts, 0.15, min_cells=2)
    assert len(found) == 1
    assert {tuple(c) for c in found[0].cells.tolist()} == _bump_cells(bump)


@settings(max_examples=15)
@given(st.floats(0.05, 0.6))
def test_anomalies_monotone_in_threshold(lower):
    xy, z = _road(np.random.default_rng(2), n=20000, ext=6.0)
    bump = BumpSpec((1.0, -1.0), 1.0, 0.4)
    pts = np.column_stack([xy, z + bump.profile(xy[:, 0], xy[:, 1])])

    def cells(th):
        return {tuple(c) for a in detect_anomalies(pts, th, min_cells=1) for c in a.cells.tolist()}

    assert cells(lower + 0.1) <= cells(lower)


def test_flat_ground_with_box():
    rng = np.random.default_rng(3)
    ground = np.column_stack([rng.uniform(-20, 20, (20000, 2)), rng.normal(0, 0.02, 20000)])
    box = np.column_stack([rng.uniform(9.5, 10.5, (500, 2)), rng.uniform(0.3, 1.2, 500)])
    split = segment_ground(np.vstack([ground, box]) + [0, 0, -1.8], seed=0)
    is_ground = np.zeros(20500, dtype=bool)
    is_ground[split.ground_indices] = True
    assert is_ground[:20000].mean() > 0.99
    assert not is_ground[20000:].any()


def test_sloped_tiles_follow_the_road():
    rng = np.random.default_rng(4)
    xy = rng.uniform(-20, 20, (20000, 2))
    pts = np.column_stack([xy, 0.08 * xy[:, 0] + rng.normal(0, 0.02, len(xy))])
    split = segment_ground(PointCloud(pts, np.zeros(len(pts)), np.zeros(len(pts))), seed=1)
    assert len(split.ground_indices) > 0.99 * len(pts)


def test_split_is_a_partition():
    rng = np.random.default_rng(5)
    pts = rng.normal(0, 3, (3000, 3))
    split = segment_ground(pts)
    both = np.concatenate([split.ground_indices, split.nonground_indices])
    assert np.array_equal(np.sort(both), np.arange(3000))


def test_empty_cloud_rejected():
    with pytest.raises(ValueError):
        segment_ground(np.zeros((0, 3)))


def test_tile_index_round_trips():
    xy = np.array([[0.1, 0.1], [4.9, 0.0], [5.0, 0.0], [-0.1, 0.0]])
    inv, tiles = tile_index(xy, 5.0)
    assert [tuple(t) for t in tiles[inv].tolist()] == [(0, 0), (0, 0), (1, 0), (-1, 0)]


def test_road_model_margin():
    model = RoadWorldModel(cell_m=0.5)
    accumulate(model, np.array([[0.2, 0.2, 0], [5.0, 5.0, 0]]), [True, False], frame_index=3)
    assert len(model) == 1 and model.frames.tolist() == [3]
    q = np.array([[0.3, 0.3], [1.2, 0.2], [3.0, 3.0]])
    assert model.in_road(q).tolist() == [True, False, False]
    assert model.in_road(q, margin_m=1.0).tolist() == [True, True, False]
    assert model.cell_counts() == {(0, 0): 1}
