"""Command-line entry point.

Verbs:
  generate       render a synthetic dataset to a directory
  run            execute the ablation pipeline and write reports
  compare        paired per-seed statistics between two reports
  detect-planes  single-frame plane detection, for inspection
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import dataset_io, experiment
from .ba import PipelineConfig, SolverConfig
from .depth import ScaleCorrection, compute_normal_map
from .planes import RansacConfig, detect_all_planes, inlier_mask_image, sample_depth_points

logger = logging.getLogger(__name__)


def _apply_overrides(data: dict, pairs) -> dict:
    """Apply ``section.key=value`` overrides onto a nested config mapping."""
    for pair in pairs or []:
        if "=" not in pair:
            raise SystemExit(f"override {pair!r} is not of the form key=value")
        key, raw = pair.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError:
            value = raw
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return data


def cmd_generate(args) -> int:
    if args.scene:
        scene_data = yaml.safe_load(Path(args.scene).read_text())
    else:
        scene_data = {}
    scene_data = _apply_overrides(scene_data, args.set)
    if args.seed is not None:
        scene_data["seed"] = args.seed
    spec = experiment.scene_from_dict(scene_data)
    from .simulate import generate
    dataset = generate(spec)
    dataset_io.save_dataset(dataset, Path(args.out))
    n_obs = sum(len(f.observations) for f in dataset.frames)
    print(f"wrote {len(dataset.frames)} frames, {n_obs} observations to {args.out}")
    return 0


def cmd_run(args) -> int:
    data = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            print(f"error: config file {path} does not exist", file=sys.stderr)
            return 2
        data = yaml.safe_load(path.read_text()) or {}
    if args.scene:
        scene_path = Path(args.scene)
        if not scene_path.exists():
            print(f"error: scene file {scene_path} does not exist", file=sys.stderr)
            return 2
        data["scene"] = str(scene_path)
    if args.seeds:
        data["seeds"] = [int(s) for s in args.seeds.split(",")]
    if args.variants:
        data["variants"] = args.variants.split(",")
    data = _apply_overrides(data, args.set)
    try:
        config = experiment.experiment_from_dict(data, output_dir=Path(args.out))
        report = experiment.run_experiment(config)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for name in config.variants:
        med = report.median_ate(name)
        print(f"{name:10s} median ATE: " + ("n/a" if med is None else f"{med:.6f} m"))
    print(f"report written to {Path(args.out) / 'report.json'}")
    return 0


def cmd_compare(args) -> int:
    try:
        rep_a = experiment.RunReport.from_json(Path(args.report_a))
        rep_b = experiment.RunReport.from_json(Path(args.report_b))
        cmp_result = experiment.compare_reports(rep_a, rep_b,
                                                variant_a=args.variant_a,
                                                variant_b=args.variant_b)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(cmp_result.to_dict(), indent=2, sort_keys=True))
    if args.out:
        Path(args.out).write_text(json.dumps(cmp_result.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_detect_planes(args) -> int:
    try:
        dataset = dataset_io.load_dataset(Path(args.data))
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    by_id = {f.depth_frame.frame_id: f for f in dataset.frames}
    if args.frame not in by_id:
        print(f"error: frame {args.frame} not in dataset", file=sys.stderr)
        return 1
    rec = by_id[args.frame]
    cfg = RansacConfig(seed=args.seed)
    normal_map = compute_normal_map(rec.depth_frame)
    rng = np.random.default_rng(args.seed)
    samples = sample_depth_points(rec.depth_frame, normal_map,
                                  ScaleCorrection(factor=1.0, sample_count=0, valid=False),
                                  budget=args.budget, rng=rng)
    log = []
    planes = detect_all_planes([], samples, dataset.gravity, cfg, log=log)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    dataset_io.write_planes(planes, outdir / f"planes_frame{args.frame:06d}.json")
    if args.masks:
        for i, plane in enumerate(planes):
            mask = inlier_mask_image(rec.depth_frame, plane, cfg.distance_threshold)
            dataset_io.write_pgm_mask(
                mask, outdir / f"mask_frame{args.frame:06d}_plane{i}.pgm")
    print(f"detected {len(planes)} planes "
          f"({', '.join(p.orientation_class for p in planes) or 'none'})")
    for rec_log in log:
        print(f"  {rec_log.stage:12s} trials={rec_log.trials:4d} draws={rec_log.draws:5d} "
              f"accepted={rec_log.accepted} {rec_log.seconds * 1e3:.1f} ms")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="planarba",
                                     description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a synthetic dataset")
    p.add_argument("--scene", help="scene YAML (defaults to the standard room)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a scene key, e.g. noise.pixel_sigma=1.0")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("run", help="run the ablation experiment")
    p.add_argument("--config", help="experiment YAML")
    p.add_argument("--scene", help="scene YAML overriding the config's scene")
    p.add_argument("--out", required=True, help="output directory for reports")
    p.add_argument("--seeds", help="comma-separated seeds, e.g. 0,1,2,3,4")
    p.add_argument("--variants", help="comma-separated subset of baseline,P,U,UP")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key, e.g. solver.plane_weight=0.1")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="paired statistics between two reports")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.add_argument("--variant-a", default=None)
    p.add_argument("--variant-b", default=None)
    p.add_argument("--out", default=None, help="also write the comparison JSON here")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("detect-planes", help="single-frame plane detection")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--budget", type=int, default=600)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--masks", action="store_true", help="write PGM inlier masks")
    p.set_defaults(func=cmd_detect_planes)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
