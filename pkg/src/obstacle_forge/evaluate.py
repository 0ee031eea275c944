"""BEV evaluation: per-frame matching, heatmap grids, CSV/PGM output."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Box3D, PoseTrack, RigidTransform, wrap_angle
from .dataset import save_gray8

N_ROWS, N_COLS = 10, 6
ROW_M, COL_M = 10.0, 4.0
LATERAL_MIN = -12.0
MATCH_DIST = 1.0


@dataclass
class HeatmapGrid:
    """10 x 6 BEV grid; cell (r, c) covers x in [10r, 10r+10), y in
    [-12+4c, -8+4c). NaN marks cells without samples."""

    values: np.ndarray = field(default_factory=lambda: np.full((N_ROWS, N_COLS), np.nan))

    def __getitem__(self, rc):
        v = self.values[rc]
        return None if np.isnan(v) else float(v)

    def __eq__(self, other):
        return isinstance(other, HeatmapGrid) and np.array_equal(self.values, other.values, equal_nan=True)


def cell_of(x: float, y: float) -> tuple[int, int] | None:
    r = int(np.floor(x / ROW_M))
    c = int(np.floor((y - LATERAL_MIN) / COL_M))
    if 0 <= r < N_ROWS and 0 <= c < N_COLS:
        return r, c
    return None


@dataclass
class MatchResult:
    frame_index: int
    tp: list[tuple[Box3D, Box3D]]
    fp: list[Box3D]
    fn: list[Box3D]


def match_frame(gt: list[Box3D], pred: list[Box3D], threshold: float = MATCH_DIST) -> MatchResult:
    """Greedy one-to-one matching by ascending BEV centre distance; only
    pairs strictly closer than ``threshold`` are admitted."""
    frames = {b.frame_index for b in gt} | {b.frame_index for b in pred}
    if len(frames) > 1:
        raise ValueError("boxes span several frames")
    frame = frames.pop() if frames else 0
    cand = []
    for i, g in enumerate(gt):
        for j, p in enumerate(pred):
            d = float(np.hypot(g.x - p.x, g.y - p.y))
            if d < threshold:
                cand.append((d, g.id, p.id, i, j))
    cand.sort()
    used_g, used_p, tp = set(), set(), []
    for _, _, _, i, j in cand:
        if i in used_g or j in used_p:
            continue
        used_g.add(i)
        used_p.add(j)
        tp.append((gt[i], pred[j]))
    tp.sort(key=lambda gp: (gp[0].id, gp[1].id))
    fp = [p for j, p in enumerate(pred) if j not in used_p]
    fn = [g for i, g in enumerate(gt) if i not in used_g]
    return MatchResult(frame, tp, fp, fn)


def match_all(gt: list[Box3D], pred: list[Box3D], threshold: float = MATCH_DIST) -> list[MatchResult]:
    frames = sorted({b.frame_index for b in gt} | {b.frame_index for b in pred})
    g_by, p_by = {}, {}
    for b in gt:
        g_by.setdefault(b.frame_index, []).append(b)
    for b in pred:
        p_by.setdefault(b.frame_index, []).append(b)
    return [match_frame(g_by.get(f, []), p_by.get(f, []), threshold) for f in frames]


def _accumulate(samples) -> tuple[np.ndarray, np.ndarray]:
    total = np.zeros((N_ROWS, N_COLS))
    count = np.zeros((N_ROWS, N_COLS))
    for (x, y), val in samples:
        rc = cell_of(x, y)
        if rc is not None:
            total[rc] += val
            count[rc] += 1
    return total, count


def _ratio(num, den) -> HeatmapGrid:
    with np.errstate(invalid="ignore", divide="ignore"):
        return HeatmapGrid(np.where(den > 0, num / np.where(den > 0, den, 1), np.nan))


def precision_heatmap(matches: list[MatchResult]) -> HeatmapGrid:
    """TP / (TP + FP), binned by predicted centre."""
    tp, n_tp = _accumulate(((p.x, p.y), 1.0) for m in matches for _, p in m.tp)
    _, n_fp = _accumulate(((p.x, p.y), 1.0) for m in matches for p in m.fp)
    return _ratio(tp, n_tp + n_fp)


def recall_heatmap(matches: list[MatchResult]) -> HeatmapGrid:
    """TP / (TP + FN), binned by ground-truth centre."""
    tp, n_tp = _accumulate(((g.x, g.y), 1.0) for m in matches for g, _ in m.tp)
    _, n_fn = _accumulate(((g.x, g.y), 1.0) for m in matches for g in m.fn)
    return _ratio(tp, n_tp + n_fn)


def _tp_mean(matches, err) -> HeatmapGrid:
    total, count = _accumulate(((g.x, g.y), err(g, p)) for m in matches for g, p in m.tp)
    return _ratio(total, count)


def displacement_heatmaps(matches: list[MatchResult]) -> tuple[HeatmapGrid, HeatmapGrid]:
    """Mean |dx| (longitudinal) and |dy| (lateral) over TPs, GT-binned."""
    return (_tp_mean(matches, lambda g, p: abs(p.x - g.x)), _tp_mean(matches, lambda g, p: abs(p.y - g.y)))


def extent_heatmaps(matches: list[MatchResult]) -> tuple[HeatmapGrid, HeatmapGrid, HeatmapGrid]:
    """Mean absolute length, width and height errors over TPs, GT-binned."""
    return (_tp_mean(matches, lambda g, p: abs(p.l - g.l)), _tp_mean(matches, lambda g, p: abs(p.w - g.w)),
            _tp_mean(matches, lambda g, p: abs(p.h - g.h)))


def id_changes(matches: list[MatchResult]) -> list[tuple[Box3D, int, int]]:
    """(gt box, previous pred id, new pred id) for every identity switch."""
    by_gt: dict[int, list[tuple[int, Box3D, int]]] = {}
    for m in matches:
        for g, p in m.tp:
            by_gt.setdefault(g.id, []).append((m.frame_index, g, p.id))
    out = []
    for gid in sorted(by_gt):
        seq = sorted(by_gt[gid], key=lambda e: e[0])
        for (_, _, prev), (_, g, cur) in zip(seq, seq[1:]):
            if cur != prev:
                out.append((g, prev, cur))
    return out


def track_id_change_heatmap(matches: list[MatchResult]) -> HeatmapGrid:
    """Count of prediction-id switches along each GT track, binned at the
    GT position of the frame where the switch shows up. Zero where no
    switch happened (every cell is defined)."""
    total, _ = _accumulate(((g.x, g.y), 1.0) for g, _, _ in id_changes(matches))
    return HeatmapGrid(total)


def write_heatmap(grid: HeatmapGrid, path) -> None:
    """``path``.csv (6 decimals, ``none`` for empty cells) and ``path``.pgm
    (min -> 0, max -> 255, empty -> 0; a constant grid maps to 0)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    vals = grid.values
    with open(path.with_suffix(".csv"), "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        for row in vals:
            wr.writerow(["none" if np.isnan(v) else f"{v:.6f}" for v in row])
    ok = ~np.isnan(vals)
    img = np.zeros(vals.shape, dtype=np.uint8)
    if ok.any():
        lo, hi = vals[ok].min(), vals[ok].max()
        if hi > lo:
            img[ok] = np.round((vals[ok] - lo) / (hi - lo) * 255).astype(np.uint8)
    save_gray8(img, path.with_suffix(".pgm"))


# -- frames --------------------------------------------------------------------

def to_ego(boxes: list[Box3D], poses: PoseTrack, frame_times: list[float]) -> list[Box3D]:
    """World-frame boxes re-expressed in the ego frame at their frame time."""
    out = []
    cache: dict[int, RigidTransform] = {}
    for b in boxes:
        if b.frame_index not in cache:
            cache[b.frame_index] = poses.at(frame_times[b.frame_index - 1]).inverse()
        t = cache[b.frame_index]
        x, y, z = t.apply(np.array([b.x, b.y, b.z]))
        r2 = t.rotation[:2, :2]
        v, a = r2 @ np.asarray(b.v), r2 @ np.asarray(b.a)
        out.append(Box3D(float(x), float(y), float(z), b.w, b.h, b.l, float(wrap_angle(b.theta + t.yaw)),
                         (float(v[0]), float(v[1])), (float(a[0]), float(a[1])), b.id, b.c, b.frame_index))
    return out


@dataclass
class Evaluation:
    matches: list[MatchResult]
    grids: dict[str, HeatmapGrid]
    summary: dict[str, float]


def pooled(matches: list[MatchResult], max_x: float = 60.0, min_x: float = 0.0) -> dict[str, float]:
    """Precision, recall and mean displacements over cells with
    min_x <= x < max_x (predictions binned by their own position, GT by
    theirs, like the heatmaps)."""
    def inside(b):
        rc = cell_of(b.x, b.y)
        return rc is not None and min_x <= b.x < max_x

    tp_p = sum(1 for m in matches for _, p in m.tp if inside(p))
    fp = sum(1 for m in matches for p in m.fp if inside(p))
    tps = [(g, p) for m in matches for g, p in m.tp if inside(g)]
    fn = sum(1 for m in matches for g in m.fn if inside(g))
    nan = float("nan")
    return {
        "precision": tp_p / (tp_p + fp) if tp_p + fp else nan,
        "recall": len(tps) / (len(tps) + fn) if tps or fn else nan,
        "long_disp": float(np.mean([abs(p.x - g.x) for g, p in tps])) if tps else nan,
        "lat_disp": float(np.mean([abs(p.y - g.y) for g, p in tps])) if tps else nan,
        "id_changes": float(sum(1 for g, _, _ in id_changes(matches) if inside(g))),
    }


def evaluate(gt: list[Box3D], pred: list[Box3D]) -> Evaluation:
    """Ego-frame boxes in, grids and global summary out."""
    matches = match_all(gt, pred)
    long_d, lat_d = displacement_heatmaps(matches)
    len_e, wid_e, hei_e = extent_heatmaps(matches)
    grids = {"precision": precision_heatmap(matches), "recall": recall_heatmap(matches), "long_disp": long_d,
             "lat_disp": lat_d, "len_err": len_e, "wid_err": wid_e, "hei_err": hei_e,
             "id_changes": track_id_change_heatmap(matches)}
    n_tp = sum(len(m.tp) for m in matches)
    n_fp = sum(len(m.fp) for m in matches)
    n_fn = sum(len(m.fn) for m in matches)
    tps = [gp for m in matches for gp in m.tp]
    nan = float("nan")
    summary = {
        "tp": n_tp, "fp": n_fp, "fn": n_fn,
        "precision": n_tp / (n_tp + n_fp) if n_tp + n_fp else nan,
        "recall": n_tp / (n_tp + n_fn) if n_tp + n_fn else nan,
        "mean_long_disp": float(np.mean([abs(p.x - g.x) for g, p in tps])) if tps else nan,
        "mean_lat_disp": float(np.mean([abs(p.y - g.y) for g, p in tps])) if tps else nan,
        "id_changes": len(id_changes(matches)),
    }
    return Evaluation(matches, grids, summary)


def write_evaluation(ev: Evaluation, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, grid in ev.grids.items():
        write_heatmap(grid, out / name)
    with open(out / "summary.csv", "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["metric", "value"])
        for k, v in ev.summary.items():
            wr.writerow([k, "none" if isinstance(v, float) and np.isnan(v) else v])
