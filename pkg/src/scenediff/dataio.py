"""Scan ingestion, pose-based aggregation into dense ground truth, dataset
pairing, and cloud export.

Scan files follow the common automotive binary layout: consecutive
little-endian float32 quadruplets (x, y, z, intensity). Per-point semantic
ids, when present, live in a sibling ``.label`` file of little-endian uint32
values whose low 16 bits carry the class. Poses map sensor coordinates to a
world frame; pose files hold one 3x4 row-major rigid transform per line,
optionally composed with a calibration transform.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloud import (
    PointCloud,
    farthest_point_sample,
    range_crop,
    uniform_sample,
)

# Semantic ids conventionally assigned to moving objects (moving-car,
# moving-person, ... in the 252-259 block).
DEFAULT_MOVING_CLASSES = frozenset(range(252, 260))

RECORD_BYTES = 16  # four little-endian float32 per point


class ParseError(ValueError):
    """A file violated its binary layout; carries path and byte offset."""

    def __init__(self, message, path=None, offset=None):
        super().__init__(message)
        self.path = str(path) if path is not None else None
        self.offset = offset


@dataclass(frozen=True)
class ScanRecord:
    """One scan: points in the sensor frame, a sensor-to-world pose, optional
    per-point semantic labels."""

    points: PointCloud
    pose: np.ndarray = field(default_factory=lambda: np.eye(4))
    labels: np.ndarray | None = None

    def __post_init__(self):
        pose = np.asarray(self.pose, dtype=np.float64)
        if pose.shape != (4, 4):
            raise ValueError(f"pose must be 4x4, got {pose.shape}")
        rot = pose[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
            raise ValueError("pose rotation block is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > 1e-6:
            raise ValueError("pose rotation determinant is not +1")
        if not np.allclose(pose[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("pose last row must be [0, 0, 0, 1]")
        object.__setattr__(self, "pose", pose)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(labels) != len(self.points):
                raise ValueError("labels length must match point count")
            object.__setattr__(self, "labels", labels)


def read_scan(path, pose=None) -> ScanRecord:
    """Parse a binary scan file; labels are attached when a sibling file with
    the ``.label`` suffix exists."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) % RECORD_BYTES != 0:
        offset = (len(raw) // RECORD_BYTES) * RECORD_BYTES
        raise ParseError(
            f"{path}: {len(raw)} bytes is not a multiple of {RECORD_BYTES}; "
            f"parse fails at byte offset {offset}",
            path=path,
            offset=offset,
        )
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    pc = PointCloud(data[:, :3].astype(np.float64), data[:, 3].astype(np.float64))
    labels = None
    label_path = path.with_suffix(".label")
    if label_path.exists():
        lraw = label_path.read_bytes()
        if len(lraw) % 4 != 0:
            offset = (len(lraw) // 4) * 4
            raise ParseError(
                f"{label_path}: {len(lraw)} bytes is not a multiple of 4",
                path=label_path,
                offset=offset,
            )
        ids = np.frombuffer(lraw, dtype="<u4")
        if len(ids) != len(pc):
            raise ParseError(
                f"{label_path}: {len(ids)} labels for {len(pc)} points",
                path=label_path,
            )
        labels = (ids & 0xFFFF).astype(np.int64)
    return ScanRecord(pc, pose if pose is not None else np.eye(4), labels)


def read_calib(path) -> np.ndarray:
    """Sensor-to-reference calibration from a ``key: 12 floats`` text file
    (the ``Tr`` entry), returned as a 4x4 transform."""
    for line in Path(path).read_text().splitlines():
        if line.startswith("Tr"):
            vals = [float(v) for v in line.split(":", 1)[1].split()]
            if len(vals) != 12:
                raise ParseError(f"{path}: Tr entry needs 12 values", path=path)
            tr = np.eye(4)
            tr[:3] = np.array(vals).reshape(3, 4)
            return tr
    raise ParseError(f"{path}: no Tr entry found", path=path)


def read_poses(path, calib: np.ndarray | None = None) -> list:
    """Per-scan sensor-to-world transforms.

    Each line holds 12 floats (3x4 row-major). When a calibration transform
    is given, it is composed on the right so the result maps raw sensor
    coordinates to the world frame.
    """
    poses = []
    for ln, line in enumerate(Path(path).read_text().splitlines()):
        if not line.strip():
            continue
        vals = [float(v) for v in line.split()]
        if len(vals) != 12:
            raise ParseError(f"{path}: line {ln} has {len(vals)} values, need 12", path=path)
        m = np.eye(4)
        m[:3] = np.array(vals).reshape(3, 4)
        poses.append(m @ calib if calib is not None else m)
    return poses


def load_sequence(scans_dir, poses_file=None, calib_file=None) -> list:
    """Read every ``.bin`` scan in a directory (sorted by name) with poses."""
    paths = sorted(Path(scans_dir).glob("*.bin"))
    if not paths:
        raise ParseError(f"no .bin scans under {scans_dir}", path=scans_dir)
    calib = read_calib(calib_file) if calib_file else None
    poses = read_poses(poses_file, calib) if poses_file else [np.eye(4)] * len(paths)
    if len(poses) < len(paths):
        raise ParseError(
            f"{len(poses)} poses for {len(paths)} scans", path=poses_file
        )
    return [read_scan(p, pose) for p, pose in zip(paths, poses)]


def _transform(points: np.ndarray, m: np.ndarray) -> np.ndarray:
    return points @ m[:3, :3].T + m[:3, 3]


def aggregate(
    scans: list,
    center_index: int,
    max_range: float,
    moving_classes=DEFAULT_MOVING_CLASSES,
) -> PointCloud:
    """Fuse scans into the center scan's frame, excluding moving objects.

    Every scan is lifted to the world frame through its pose, re-expressed in
    the center scan's frame, stripped of points whose label is in the moving
    set, and the union is cropped to max_range.
    """
    if not 0 <= center_index < len(scans):
        raise ValueError(f"center_index {center_index} out of range")
    center_inv = np.linalg.inv(scans[center_index].pose)
    chunks = []
    moving = frozenset(moving_classes)
    for i, scan in enumerate(scans):
        if not np.isfinite(scan.pose).all():
            raise ValueError(f"scan {i} has a non-finite pose")
        pts = _transform(_transform(scan.points.points, scan.pose), center_inv)
        if scan.labels is not None and moving:
            keep = ~np.isin(scan.labels, list(moving))
            pts = pts[keep]
        chunks.append(pts)
    merged = PointCloud(np.concatenate(chunks) if chunks else np.zeros((0, 3)))
    return range_crop(merged, max_range)


@dataclass(frozen=True)
class PairConfig:
    """Budgets and preprocessing knobs for building training/eval pairs."""

    budget_sparse: int = 18_000
    budget_dense: int = 180_000
    max_range: float = 50.0
    seed: int = 0
    moving_classes: frozenset = DEFAULT_MOVING_CLASSES


def make_pair(scans: list, center_index: int, cfg: PairConfig):
    """(sparse input, dense target) pair for one center scan.

    The sparse side is the cropped center scan reduced by farthest point
    sampling; the dense side is the aggregate reduced by uniform sampling.
    Budgets bind only when inputs exceed them.
    """
    center = scans[center_index]
    sparse = range_crop(center.points, cfg.max_range)
    p_s = farthest_point_sample(sparse, cfg.budget_sparse, seed=cfg.seed)
    dense = aggregate(scans, center_index, cfg.max_range, cfg.moving_classes)
    p_d = uniform_sample(dense, cfg.budget_dense, seed=cfg.seed + 1)
    return p_s, p_d


def write_cloud(pc: PointCloud, path, fmt: str | None = None) -> None:
    """Write a cloud as PLY (ascii header, binary little-endian payload) or
    BIN (the scan layout, intensity 0 when absent). Format defaults from the
    file extension."""
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt == "bin":
        inten = pc.intensity if pc.intensity is not None else np.zeros(len(pc))
        rec = np.column_stack([pc.points, inten]).astype("<f4")
        rec.tofile(path)
    elif fmt == "ply":
        props = ["property float x", "property float y", "property float z"]
        cols = [pc.points]
        if pc.intensity is not None:
            props.append("property float intensity")
            cols.append(pc.intensity[:, None])
        header = "\n".join(
            [
                "ply",
                "format binary_little_endian 1.0",
                f"element vertex {len(pc)}",
                *props,
                "end_header",
            ]
        )
        with open(path, "wb") as f:
            f.write(header.encode("ascii") + b"\n")
            f.write(np.concatenate(cols, axis=1).astype("<f4").tobytes())
    else:
        raise ValueError(f"unknown format {fmt!r} (use 'ply' or 'bin')")


def read_cloud(path) -> PointCloud:
    """Read a cloud written by write_cloud (PLY subset or BIN layout)."""
    path = Path(path)
    if path.suffix.lower() == ".bin":
        return read_scan(path).points
    raw = path.read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise ParseError(f"{path}: not a PLY file", path=path)
    header = raw[:end].decode("ascii").splitlines()
    n = None
    props = []
    for line in header:
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        elif line.startswith("property float"):
            props.append(line.split()[-1])
    if n is None:
        raise ParseError(f"{path}: missing vertex element", path=path)
    body = raw[end + len(b"end_header\n"):]
    expected = n * 4 * len(props)
    if len(body) < expected:
        raise ParseError(
            f"{path}: payload holds {len(body)} bytes, need {expected}",
            path=path,
            offset=end + len(b"end_header\n") + len(body),
        )
    data = np.frombuffer(body[:expected], dtype="<f4").reshape(n, len(props))
    inten = data[:, 3].astype(np.float64) if "intensity" in props else None
    return PointCloud(data[:, :3].astype(np.float64), inten)
