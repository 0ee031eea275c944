import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import _box, golden_eval
from obstacle_forge.core import PoseTrack, RigidTransform
from obstacle_forge.dataset import load_mask
from obstacle_forge.evaluate import (HeatmapGrid, cell_of, displacement_heatmaps, evaluate, extent_heatmaps,
                                     id_changes, match_all, match_frame, precision_heatmap, recall_heatmap,
                                     to_ego, track_id_change_heatmap, write_evaluation, write_heatmap)


def test_golden_fixture_reproduces_hand_counts():
    gt, pred, expected = golden_eval()
    ev = evaluate(gt, pred)
    assert ev.summary == expected["summary"]
    for name, want in expected["grids"].items():
        assert np.array_equal(ev.grids[name].values, want, equal_nan=True), name


def test_cell_layout():
    assert cell_of(0.0, -12.0) == (0, 0)
    assert cell_of(59.99, 3.99) == (5, 3)
    assert cell_of(99.9, 11.9) == (9, 5)
    assert cell_of(-0.1, 0) is None and cell_of(100, 0) is None and cell_of(5, 12.0) is None


@pytest.mark.parametrize("px,tp", [(50.4, 1), (51.5, 0), (51.0, 0)])
def test_match_threshold_is_strict(px, tp):
    m = match_frame([_box(1, 1, 50.0, 0.0)], [_box(1, 7, px, 0.0)])
    assert len(m.tp) == tp and len(m.fp) == len(m.fn) == 1 - tp


def test_greedy_prefers_nearer_gt():
    m = match_frame([_box(1, 1, 50.0, 0.0), _box(1, 2, 50.0, 0.9)], [_box(1, 7, 50.0, 0.4)])
    assert [(g.id, p.id) for g, p in m.tp] == [(1, 7)] and [g.id for g in m.fn] == [2]


def test_equal_distance_ties_go_to_lower_gt_id():
    m = match_frame([_box(1, 5, 50.0, 0.5), _box(1, 2, 50.0, -0.5)], [_box(1, 7, 50.0, 0.0)])
    assert [(g.id, p.id) for g, p in m.tp] == [(2, 7)]


def test_match_frame_rejects_mixed_frames():
    with pytest.raises(ValueError):
        match_frame([_box(1, 1, 0, 0)], [_box(2, 1, 0, 0)])


def test_no_predictions():
    gt = [_box(1, 1, 15.0, 0.0), _box(2, 1, 25.0, 0.0)]
    m = match_all(gt, [])
    assert np.all(np.isnan(precision_heatmap(m).values))
    r = recall_heatmap(m)
    assert r[1, 3] == 0.0 and r[2, 3] == 0.0 and np.isnan(r.values).sum() == 58


def test_single_tp_offsets():
    m = match_all([_box(1, 1, 20.0, 0.0, l=4.0)], [_box(1, 2, 20.25, -0.125, l=4.125)])
    lon, lat = displacement_heatmaps(m)
    assert (lon[2, 3], lat[2, 3]) == (0.25, 0.125)
    assert extent_heatmaps(m)[0][2, 3] == 0.125
    assert lon[0, 0] is None


def test_two_tp_extent_mean():
    gt = [_box(1, 1, 20.0, 0.0), _box(1, 2, 22.0, 1.0)]
    pred = [_box(1, 7, 20.0, 0.0, l=4.1), _box(1, 8, 22.0, 1.0, l=4.3)]
    assert extent_heatmaps(match_all(gt, pred))[0][2, 3] == pytest.approx(0.2)


def test_id_changes_aaBBa():
    gt = [_box(f, 1, 40.0 + f, 0.0) for f in range(1, 6)]
    pred = [_box(f, pid, 40.0 + f, 0.0) for f, pid in zip(range(1, 6), [7, 7, 8, 8, 7])]
    m = match_all(gt, pred)
    assert [(g.frame_index, a, b) for g, a, b in id_changes(m)] == [(3, 7, 8), (5, 8, 7)]
    grid = track_id_change_heatmap(m)
    assert grid[4, 3] == 2.0 and np.nansum(grid.values) == 2.0


def test_id_change_binned_where_it_happens():
    gt = [_box(1, 1, 45.0, 2.0), _box(2, 1, 55.0, 2.0)]
    pred = [_box(1, 3, 45.0, 2.0), _box(2, 4, 55.0, 2.0)]
    g = track_id_change_heatmap(match_all(gt, pred))
    assert g[5, 3] == 1.0 and g[4, 3] == 0.0


def _random_frames(seed):
    rng = np.random.default_rng(seed)
    gt, pred = [], []
    for f in range(1, 6):
        for k in range(rng.integers(0, 5)):
            x, y = rng.uniform(0, 100), rng.uniform(-12, 12)
            gt.append(_box(f, k, x, y))
            if rng.random() < 0.7:
                pred.append(_box(f, 10 + k, x + rng.normal(0, 0.6), y + rng.normal(0, 0.6)))
        for k in range(rng.integers(0, 2)):
            pred.append(_box(f, 50 + k, rng.uniform(0, 100), rng.uniform(-12, 12)))
    return gt, pred


@given(st.integers(0, 2**32 - 1))
def test_counting_invariants(seed):
    gt, pred = _random_frames(seed)
    ms = match_all(gt, pred)
    for m in ms:
        n_gt = sum(1 for b in gt if b.frame_index == m.frame_index)
        n_pred = sum(1 for b in pred if b.frame_index == m.frame_index)
        assert len(m.tp) + len(m.fn) == n_gt and len(m.tp) + len(m.fp) == n_pred
    tp = sum(len(m.tp) for m in ms)
    assert sum(len(m.tp) for m in match_all(gt, pred, threshold=0.5)) <= tp


@given(st.integers(0, 2**32 - 1))
def test_heatmaps_ignore_frame_order(seed):
    gt, pred = _random_frames(seed)
    a = evaluate(gt, pred)
    b = evaluate(gt[::-1], pred[::-1])
    assert all(a.grids[k] == b.grids[k] for k in a.grids)


def _read_pgm(path):
    return load_mask(path).pixels


def test_write_heatmap_uniform(tmp_path):
    write_heatmap(HeatmapGrid(np.full((10, 6), 0.5)), tmp_path / "g")
    rows = (tmp_path / "g.csv").read_text().splitlines()
    assert len(rows) == 10 and rows[0] == ",".join(["0.500000"] * 6)
    assert not _read_pgm(tmp_path / "g.pgm").any()


def test_write_heatmap_binary_and_empty(tmp_path):
    v = np.zeros((10, 6))
    v[2, 3] = 1.0
    write_heatmap(HeatmapGrid(v), tmp_path / "b")
    px = _read_pgm(tmp_path / "b.pgm")
    assert px[2, 3] == 255 and px.sum() == 255
    write_heatmap(HeatmapGrid(), tmp_path / "e")
    assert set((tmp_path / "e.csv").read_text().replace("\n", ",").strip(",").split(",")) == {"none"}
    assert not _read_pgm(tmp_path / "e.pgm").any()


def test_write_evaluation_outputs(tmp_path):
    gt, pred, _ = golden_eval()
    write_evaluation(evaluate(gt, pred), tmp_path)
    for name in ("precision", "recall", "long_disp", "lat_disp", "len_err", "wid_err", "hei_err", "id_changes"):
        assert (tmp_path / f"{name}.csv").exists() and (tmp_path / f"{name}.pgm").exists()
    text = (tmp_path / "summary.csv").read_text()
    assert text.startswith("metric,value\ntp,5\n")


def test_to_ego_moves_boxes_with_the_pose():
    tr = PoseTrack([0.0, 1.0], [RigidTransform.from_yaw(0.0, (0, 0, 0)), RigidTransform.from_yaw(np.pi / 2, (10, 0, 0))])
    b = _box(2, 1, 10.0, 5.0)
    (e,) = to_ego([b], tr, [0.0, 1.0])
    assert (e.x, e.y) == pytest.approx((5.0, 0.0)) and e.theta == pytest.approx(-np.pi / 2)
