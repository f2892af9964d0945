"""Seeded ablation experiments and report handling.

Runs the windowed pipeline per (variant, seed), where a variant toggles
uncertainty weighting and plane regularization, computes ATE RMSE against
ground truth and writes machine-readable reports: a JSON report, a CSV
summary with one median per variant, and per-run trajectory files.
"""

from __future__ import annotations

import csv
import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import yaml

from . import dataset_io
from .ba import PipelineConfig, SolverConfig, run_window_pipeline
from .planes import RansacConfig
from .simulate import NoiseModel, SceneSpec, ate_rmse, default_room_spec, generate

logger = logging.getLogger(__name__)

VARIANTS = {
    "baseline": (False, False),
    "P": (False, True),
    "U": (True, False),
    "UP": (True, True),
}


@dataclass
class ExperimentConfig:
    """One experiment: a scene, seeds, and the variants to run."""

    scene: SceneSpec
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    variants: List[str] = field(default_factory=lambda: ["baseline", "P", "U", "UP"])
    solver: SolverConfig = field(default_factory=SolverConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    output_dir: Optional[Path] = None

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("at least one seed is required")
        unknown = [v for v in self.variants if v not in VARIANTS]
        if unknown:
            raise ValueError(f"unknown variants {unknown}; choose from {sorted(VARIANTS)}")


@dataclass
class RunResult:
    seed: int
    status: str
    ate: Optional[float]
    n_planes: int
    detection: List[dict] = field(default_factory=list)
    seconds: float = 0.0


@dataclass
class RunReport:
    """Per-variant, per-seed outcomes plus medians over completed runs."""

    variants: Dict[str, Dict[int, RunResult]] = field(default_factory=dict)

    def median_ate(self, variant: str) -> Optional[float]:
        vals = [r.ate for r in self.variants[variant].values()
                if r.status == "ok" and r.ate is not None]
        return statistics.median(vals) if vals else None

    def seeds(self, variant: str) -> List[int]:
        return sorted(self.variants[variant].keys())

    def to_dict(self) -> dict:
        out = {"variants": {}}
        for name, runs in self.variants.items():
            out["variants"][name] = {
                "median_ate": self.median_ate(name),
                "runs": {str(s): {"seed": r.seed, "status": r.status, "ate": r.ate,
                                  "n_planes": r.n_planes,
                                  "timing": {"seconds": r.seconds}}
                         for s, r in sorted(runs.items())},
            }
        return out

    def to_json(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def from_json(cls, path: Path) -> "RunReport":
        data = json.loads(Path(path).read_text())
        rep = cls()
        for name, vdata in data["variants"].items():
            rep.variants[name] = {}
            for s, rdata in vdata["runs"].items():
                rep.variants[name][int(s)] = RunResult(
                    seed=rdata["seed"], status=rdata["status"], ate=rdata["ate"],
                    n_planes=rdata.get("n_planes", 0),
                    seconds=rdata.get("timing", {}).get("seconds", 0.0))
        return rep

    def write_csv(self, path: Path) -> None:
        """Summary table: one row per variant, one ATE column per seed."""
        all_seeds = sorted({s for runs in self.variants.values() for s in runs})
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant"] + [f"seed_{s}" for s in all_seeds] + ["median"])
            for name in self.variants:
                row = [name]
                for s in all_seeds:
                    r = self.variants[name].get(s)
                    row.append("" if r is None or r.ate is None
                               else dataset_io.FLOAT_FMT % r.ate)
                med = self.median_ate(name)
                row.append("" if med is None else dataset_io.FLOAT_FMT % med)
                writer.writerow(row)

    @classmethod
    def from_csv(cls, path: Path) -> "RunReport":
        rep = cls()
        with Path(path).open() as fh:
            reader = csv.DictReader(fh)
            seed_cols = [c for c in reader.fieldnames if c.startswith("seed_")]
            for row in reader:
                name = row["variant"]
                rep.variants[name] = {}
                for c in seed_cols:
                    if row[c] != "":
                        s = int(c[len("seed_"):])
                        rep.variants[name][s] = RunResult(
                            seed=s, status="ok", ate=float(row[c]), n_planes=0)
        return rep


def run_experiment(config: ExperimentConfig) -> RunReport:
    """Execute every (variant, seed) pipeline run and assemble the report."""
    report = RunReport()
    outdir = Path(config.output_dir) if config.output_dir else None
    if outdir:
        outdir.mkdir(parents=True, exist_ok=True)
    any_ok = False
    for name in config.variants:
        use_u, use_p = VARIANTS[name]
        report.variants[name] = {}
        for seed in config.seeds:
            t0 = time.perf_counter()
            try:
                scene = replace(config.scene, seed=seed)
                dataset = generate(scene)
                pcfg = replace(config.pipeline, use_uncertainty=use_u,
                               use_planes=use_p, seed=seed)
                result = run_window_pipeline(dataset, config.solver, config.ransac, pcfg)
                truth = list(zip(dataset.ground_truth.timestamps,
                                 dataset.ground_truth.poses))
                ate = ate_rmse(result.trajectory, truth)
                rr = RunResult(seed=seed, status="ok", ate=ate,
                               n_planes=len(result.planes),
                               detection=result.report["detection"],
                               seconds=time.perf_counter() - t0)
                any_ok = True
                if outdir:
                    dataset_io.write_trajectory(
                        result.trajectory, outdir / f"trajectory_{name}_seed{seed}.txt")
            except Exception as exc:  # record the failure, keep going
                logger.exception("run %s seed %d failed", name, seed)
                rr = RunResult(seed=seed, status=f"failed: {exc}", ate=None,
                               n_planes=0, seconds=time.perf_counter() - t0)
            report.variants[name][seed] = rr
            logger.info("variant %-8s seed %d: %s ate=%s", name, seed, rr.status,
                        "n/a" if rr.ate is None else f"{rr.ate:.5f}")
    if outdir:
        report.to_json(outdir / "report.json")
        report.write_csv(outdir / "summary.csv")
    if not any_ok:
        raise RuntimeError("all runs failed")
    return report


@dataclass
class Comparison:
    """Paired per-seed statistics between two report columns (b minus a)."""

    seeds: List[int]
    ate_a: Dict[int, float]
    ate_b: Dict[int, float]
    deltas: Dict[int, float]
    wins_b: int
    median_delta: float

    def to_dict(self) -> dict:
        return {"seeds": self.seeds,
                "ate_a": {str(k): v for k, v in self.ate_a.items()},
                "ate_b": {str(k): v for k, v in self.ate_b.items()},
                "deltas": {str(k): v for k, v in self.deltas.items()},
                "wins_b": self.wins_b, "median_delta": self.median_delta}


def compare_reports(report_a: RunReport, report_b: RunReport,
                    variant_a: Optional[str] = None,
                    variant_b: Optional[str] = None) -> Comparison:
    """Per-seed ATE deltas between two runs; negative deltas favor b."""
    def pick(report: RunReport, variant: Optional[str]) -> Dict[int, RunResult]:
        if variant is None:
            if len(report.variants) != 1:
                raise ValueError("report holds several variants; specify one")
            variant = next(iter(report.variants))
        if variant not in report.variants:
            raise ValueError(f"variant {variant!r} not in report")
        return report.variants[variant]

    runs_a = pick(report_a, variant_a)
    runs_b = pick(report_b, variant_b)
    ok_a = {s: r.ate for s, r in runs_a.items() if r.status == "ok" and r.ate is not None}
    ok_b = {s: r.ate for s, r in runs_b.items() if r.status == "ok" and r.ate is not None}
    if set(ok_a) != set(ok_b):
        raise ValueError(f"seed sets differ: {sorted(ok_a)} vs {sorted(ok_b)}")
    if not ok_a:
        raise ValueError("no completed seeds to compare")
    seeds = sorted(ok_a)
    deltas = {s: ok_b[s] - ok_a[s] for s in seeds}
    return Comparison(seeds=seeds, ate_a=ok_a, ate_b=ok_b, deltas=deltas,
                      wins_b=sum(1 for s in seeds if deltas[s] < 0),
                      median_delta=statistics.median(deltas.values()))


# ---------------------------------------------------------------------------
# declarative configuration
# ---------------------------------------------------------------------------

def scene_from_dict(data: dict) -> SceneSpec:
    """Build a scene from a config mapping.

    Currently the default room is the only scene family; any SceneSpec or
    NoiseModel field can be overridden from the mapping.
    """
    data = dict(data or {})
    noise = NoiseModel(**data.pop("noise", {}))
    n_frames = data.pop("n_frames", 60)
    seed = data.pop("seed", 0)
    data.pop("type", None)
    return default_room_spec(seed=seed, noise=noise, n_frames=n_frames, **data)


def load_scene(path: Path) -> SceneSpec:
    return scene_from_dict(yaml.safe_load(Path(path).read_text()))


def experiment_from_dict(data: dict, output_dir: Optional[Path] = None) -> ExperimentConfig:
    scene_data = data.get("scene", {})
    if isinstance(scene_data, str):
        scene = load_scene(Path(scene_data))
    else:
        scene = scene_from_dict(scene_data)
    return ExperimentConfig(
        scene=scene,
        seeds=list(data.get("seeds", [0, 1, 2, 3, 4])),
        variants=list(data.get("variants", ["baseline", "P", "U", "UP"])),
        solver=SolverConfig(**data.get("solver", {})),
        ransac=RansacConfig(**data.get("ransac", {})),
        pipeline=PipelineConfig(**data.get("pipeline", {})),
        output_dir=output_dir,
    )


def load_experiment(path: Path, output_dir: Optional[Path] = None) -> ExperimentConfig:
    return experiment_from_dict(yaml.safe_load(Path(path).read_text()), output_dir)
