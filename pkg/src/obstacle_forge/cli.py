"""obstacle-forge {synth|detect|baseline|eval}.

Exit status: 0 success, 1 usage, 2 data error (unreadable or invalid
dataset, config or scene file), 3 internal error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import traceback
from pathlib import Path

from .config import ConfigError, PipelineConfig
from .dataset import DatasetError, load_boxes, load_dataset
from .evaluate import evaluate, to_ego, write_evaluation
from .pipeline import StageError, run_baseline, run_detect, write_baseline, write_detect
from .synthgen import SceneSpec, benchmark_scene, generate

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3

log = logging.getLogger("obstacle_forge")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="obstacle-forge", description="Offline general-obstacle detection from LiDAR and masks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, dataset=True, out_required=True):
        if dataset:
            sp.add_argument("--dataset", required=True, type=Path, help="sequence directory")
        sp.add_argument("--config", type=Path, help="pipeline config (JSON)")
        sp.add_argument("--out", required=out_required, type=Path, help="output directory")
        sp.add_argument("--threads", type=int, default=os.cpu_count() or 1)

    sp = sub.add_parser("synth", help="render a synthetic sequence")
    sp.add_argument("--config", "--spec", dest="config", type=Path,
                    help="scene spec (JSON); default is the benchmark scene")
    sp.add_argument("--seed", type=int, help="benchmark scene seed when no spec is given")
    sp.add_argument("--out", required=True, type=Path)
    sp.add_argument("--threads", type=int, default=1, help="accepted for symmetry; rendering is sequential")
    common(sub.add_parser("detect", help="run the offline 3D detector"))
    common(sub.add_parser("baseline", help="naive mask-depth baseline"))
    sp = sub.add_parser("eval", help="score predictions against ground truth")
    common(sp, out_required=False)
    sp.add_argument("--predictions", type=Path,
                    help="boxes.csv to score (default: <out>/predictions/boxes.csv)")
    return p


def _config(path) -> PipelineConfig:
    return PipelineConfig.load(path)


def cmd_synth(args) -> int:
    if args.config is not None:
        spec = SceneSpec.from_json(args.config)
    else:
        spec = benchmark_scene(args.seed) if args.seed is not None else benchmark_scene()
    generate(spec, args.out)
    log.info("wrote %d frames to %s", spec.n_frames, args.out)
    return EXIT_OK


def cmd_detect(args) -> int:
    cfg = _config(args.config)
    ds = load_dataset(args.dataset)
    res = run_detect(ds, cfg, threads=args.threads)
    path = write_detect(res, args.out)
    log.info("%d boxes -> %s", len(res.boxes), path)
    return EXIT_OK


def cmd_baseline(args) -> int:
    cfg = _config(args.config)
    ds = load_dataset(args.dataset)
    rows = run_baseline(ds, cfg)
    write_baseline(rows, args.out / "baseline" / "depths.csv")
    return EXIT_OK


def cmd_eval(args) -> int:
    _config(args.config)  # validated for consistency; scoring has no tunables
    out = args.out if args.out is not None else args.dataset
    pred_path = args.predictions if args.predictions is not None else out / "predictions" / "boxes.csv"
    ds = load_dataset(args.dataset)
    times = ds.manifest.frame_timestamps
    gt = load_boxes(args.dataset / "gt" / "boxes.csv")
    pred = load_boxes(pred_path)
    for b in gt + pred:
        if not 1 <= b.frame_index <= ds.n_frames:
            raise UsageError(f"box frame {b.frame_index} outside 1..{ds.n_frames}")
    ev = evaluate(to_ego(gt, ds.poses, times), to_ego(pred, ds.poses, times))
    write_evaluation(ev, out / "eval")
    s = ev.summary
    print(f"precision {s['precision']:.4f} recall {s['recall']:.4f} "
          f"long {s['mean_long_disp']:.4f} m lat {s['mean_lat_disp']:.4f} m id_changes {s['id_changes']}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "detect": cmd_detect, "baseline": cmd_baseline, "eval": cmd_eval}


def _is_data_error(exc: BaseException) -> bool:
    while exc is not None:
        if isinstance(exc, (DatasetError, ConfigError, FileNotFoundError, UsageError)):
            return True
        if isinstance(exc, StageError):
            exc = exc.cause
            continue
        return False
    return False


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if getattr(args, "threads", 1) < 1:
        print("obstacle-forge: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except Exception as e:  # noqa: BLE001 - mapped to exit codes
        if _is_data_error(e) or (args.command == "synth" and isinstance(e, (ValueError, TypeError))):
            print(f"obstacle-forge: data error: {e}", file=sys.stderr)
            return EXIT_DATA
        print(f"obstacle-forge: internal error: {e}", file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
