"""On-disk formats for datasets, trajectories, planes and masks.

Depth/uncertainty frames are a JSON header plus one flat little-endian
float32 binary grid per map (row-major, NaN marks invalid depth).
Observations are CSV rows (frame_id, point_id, x, y, u). Trajectories are
plain-text rows "t tx ty tz qx qy qz qw" with camera-to-world poses.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from .depth import DepthFrame
from .geometry import GravityVector, Intrinsics, Observation, Pose
from .planes import Plane

FLOAT_FMT = "%.17g"  # round-trips float64 exactly


@dataclass
class FrameRecord:
    """One dataset frame: depth prediction plus tracked observations."""

    timestamp: float
    depth_frame: DepthFrame
    observations: List[Observation]


@dataclass
class GroundTruth:
    """Simulator truth used only by evaluation and tests."""

    timestamps: List[float]
    poses: List[Pose]                      # camera -> world
    points: Dict[int, np.ndarray]
    planes: List[Plane]
    depth_maps: Optional[List[np.ndarray]] = None


@dataclass
class Dataset:
    frames: List[FrameRecord]
    gravity: GravityVector
    ground_truth: Optional[GroundTruth] = None


def _fmt(x: float) -> str:
    return FLOAT_FMT % float(x)


# ---------------------------------------------------------------------------
# depth frames
# ---------------------------------------------------------------------------

def write_depth_frame(frame: DepthFrame, directory: Path, timestamp: float = 0.0) -> Path:
    """Write header JSON plus the two float32 grids; returns the header path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = f"frame_{frame.frame_id:06d}"
    depth_name = f"{stem}.depth.bin"
    unc_name = f"{stem}.unc.bin"
    K = frame.intrinsics
    header = {
        "frame_id": frame.frame_id,
        "width": K.width,
        "height": K.height,
        "fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy,
        "pose": [float(v) for v in np.hstack([frame.pose.rotation,
                                              frame.pose.translation[:, None]]).ravel()],
        "timestamp": timestamp,
        "depth_file": depth_name,
        "uncertainty_file": unc_name,
    }
    (directory / depth_name).write_bytes(frame.depth.astype("<f4").tobytes())
    (directory / unc_name).write_bytes(frame.uncertainty.astype("<f4").tobytes())
    path = directory / f"{stem}.json"
    path.write_text(json.dumps(header, sort_keys=True))
    return path


def read_depth_frame(header_path: Path) -> Tuple[DepthFrame, float]:
    header_path = Path(header_path)
    header = json.loads(header_path.read_text())
    w, h = int(header["width"]), int(header["height"])
    K = Intrinsics(fx=header["fx"], fy=header["fy"], cx=header["cx"], cy=header["cy"],
                   width=w, height=h)
    mat = np.asarray(header["pose"], dtype=float).reshape(3, 4)
    pose = Pose(mat[:, :3], mat[:, 3])
    depth = np.frombuffer((header_path.parent / header["depth_file"]).read_bytes(),
                          dtype="<f4").astype(float).reshape(h, w)
    unc = np.frombuffer((header_path.parent / header["uncertainty_file"]).read_bytes(),
                        dtype="<f4").astype(float).reshape(h, w)
    frame = DepthFrame(frame_id=int(header["frame_id"]), depth=depth, uncertainty=unc,
                       pose=pose, intrinsics=K)
    return frame, float(header.get("timestamp", 0.0))


# ---------------------------------------------------------------------------
# observations, gravity, trajectories, planes
# ---------------------------------------------------------------------------

def write_observations(frames: List[FrameRecord], path: Path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_id", "point_id", "x", "y", "u"])
        for rec in frames:
            for obs in rec.observations:
                writer.writerow([obs.frame_id, obs.point_id,
                                 _fmt(obs.pixel[0]), _fmt(obs.pixel[1]),
                                 _fmt(obs.uncertainty)])


def read_observations(path: Path) -> Dict[int, List[Observation]]:
    by_frame: Dict[int, List[Observation]] = {}
    with Path(path).open() as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            obs = Observation(frame_id=int(row["frame_id"]), point_id=int(row["point_id"]),
                              pixel=np.array([float(row["x"]), float(row["y"])]),
                              uncertainty=float(row["u"]))
            by_frame.setdefault(obs.frame_id, []).append(obs)
    return by_frame


def write_gravity(gravity: GravityVector, path: Path) -> None:
    Path(path).write_text(json.dumps(
        {"direction": [float(v) for v in gravity.direction]}, sort_keys=True))


def read_gravity(path: Path) -> GravityVector:
    data = json.loads(Path(path).read_text())
    return GravityVector(direction=np.asarray(data["direction"], dtype=float))


def write_trajectory(entries: List[Tuple[float, Pose]], path: Path) -> None:
    """Rows of "t tx ty tz qx qy qz qw" with camera->world poses."""
    lines = []
    for t, pose in entries:
        q = Rotation.from_matrix(pose.rotation).as_quat()  # x, y, z, w
        vals = [t, *pose.translation, *q]
        lines.append(" ".join(_fmt(v) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path: Path) -> List[Tuple[float, Pose]]:
    entries = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = [float(v) for v in line.split()]
        if len(vals) != 8:
            raise ValueError(f"trajectory rows need 8 values, got {len(vals)}")
        t = vals[0]
        trans = np.asarray(vals[1:4])
        R = Rotation.from_quat(vals[4:8]).as_matrix()
        entries.append((t, Pose(R, trans)))
    return entries


def write_planes(planes: List[Plane], path: Path) -> None:
    Path(path).write_text(json.dumps([p.to_dict() for p in planes], indent=2, sort_keys=True))


def read_planes(path: Path) -> List[Plane]:
    return [Plane.from_dict(d) for d in json.loads(Path(path).read_text())]


def write_pgm_mask(mask: np.ndarray, path: Path) -> None:
    """Binary (P5) PGM with 255 for mask-true pixels."""
    h, w = mask.shape
    data = np.where(mask, 255, 0).astype(np.uint8)
    with Path(path).open("wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


# ---------------------------------------------------------------------------
# whole datasets
# ---------------------------------------------------------------------------

def save_dataset(dataset: Dataset, directory: Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frames_dir = directory / "frames"
    for rec in dataset.frames:
        write_depth_frame(rec.depth_frame, frames_dir, rec.timestamp)
    write_observations(dataset.frames, directory / "observations.csv")
    write_gravity(dataset.gravity, directory / "gravity.json")
    gt = dataset.ground_truth
    if gt is not None:
        write_trajectory(list(zip(gt.timestamps, gt.poses)),
                         directory / "groundtruth_trajectory.txt")
        write_planes(gt.planes, directory / "groundtruth_planes.json")
        pts = {str(k): [float(v) for v in xyz] for k, xyz in sorted(gt.points.items())}
        (directory / "groundtruth_points.json").write_text(json.dumps(pts, sort_keys=True))


def load_dataset(directory: Path) -> Dataset:
    directory = Path(directory)
    frames_dir = directory / "frames"
    if not frames_dir.is_dir():
        raise FileNotFoundError(f"no frames/ directory under {directory}")
    records: List[FrameRecord] = []
    obs_by_frame = read_observations(directory / "observations.csv")
    for header in sorted(frames_dir.glob("frame_*.json")):
        frame, t = read_depth_frame(header)
        records.append(FrameRecord(timestamp=t, depth_frame=frame,
                                   observations=obs_by_frame.get(frame.frame_id, [])))
    gravity = read_gravity(directory / "gravity.json")
    gt = None
    traj_path = directory / "groundtruth_trajectory.txt"
    if traj_path.exists():
        entries = read_trajectory(traj_path)
        planes = read_planes(directory / "groundtruth_planes.json") \
            if (directory / "groundtruth_planes.json").exists() else []
        points: Dict[int, np.ndarray] = {}
        pts_path = directory / "groundtruth_points.json"
        if pts_path.exists():
            points = {int(k): np.asarray(v, dtype=float)
                      for k, v in json.loads(pts_path.read_text()).items()}
        gt = GroundTruth(timestamps=[t for t, _ in entries],
                         poses=[p for _, p in entries],
                         points=points, planes=planes)
    return Dataset(frames=records, gravity=gravity, ground_truth=gt)
