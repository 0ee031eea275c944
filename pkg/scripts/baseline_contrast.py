"""Naive mask-depth baseline on a two-obstacle scene: one reflective, one
that returns no LiDAR points at all.

    python3 scripts/baseline_contrast.py --work /tmp/contrast

The reflective obstacle gets a depth close to its visible face; the dark one
is segmented in the image but has nothing to average, so it gets none.
"""

import argparse
from pathlib import Path

import numpy as np

from obstacle_forge.config import PipelineConfig
from obstacle_forge.core import project
from obstacle_forge.dataset import load_dataset
from obstacle_forge.maskproc import extract_obstacle_candidates
from obstacle_forge.pipeline import run_baseline
from obstacle_forge.synthgen import ObstacleSpec, SceneSpec, generate


def scene() -> SceneSpec:
    return SceneSpec(seed=3, duration=0.3, ego_speed=4.0, road_width=8.0, azimuth_step_deg=0.1, lidar_hfov_deg=90.0,
                     image_width=960, image_height=540, focal_px=800.0,
                     obstacles=[ObstacleSpec((40.0, -1.5, 0.6), (1.0, 1.2, 1.2), reflectivity=1.0),
                                ObstacleSpec((25.0, 1.5, 0.6), (1.0, 1.2, 1.2), reflectivity=0.0)])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", type=Path, default=Path("contrast_run"))
    args = ap.parse_args()
    spec = scene()
    generate(spec, args.work)
    ds = load_dataset(args.work)
    cfg = PipelineConfig()
    rows = {(r.frame_index, r.candidate_idx): r for r in run_baseline(ds, cfg)}
    cam = ds.cameras[0]
    for f in range(1, ds.n_frames + 1):
        ego = ds.poses.at(ds.frame_time(f)).inverse()
        cands = extract_obstacle_candidates(ds.mask("road", cam.camera_id, f), cfg.maskproc.min_area_px,
                                            cfg.maskproc.max_area_px, cam.camera_id, f)
        for ob in spec.obstacles:
            face = project(ego.apply(np.array(ob.position) - [ob.extent[0] / 2, 0, 0])[None], cam)
            r, c = int(face.v[0]), int(face.u[0])
            hit = [k for k, m in enumerate(cands) if m.to_array()[r, c]]
            est = rows[(f, hit[0])] if hit else None
            depth = "none" if est is None or est.depth is None else f"{est.depth:.3f} m"
            area = cands[hit[0]].area if hit else 0
            print(f"frame {f} reflectivity {ob.reflectivity:.1f}: true face {face.depth[0]:.3f} m, "
                  f"mask area {area} px, baseline depth {depth}")


if __name__ == "__main__":
    main()
