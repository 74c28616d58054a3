"""Point-cloud container and the preprocessing operations of the pipeline.

Coordinates are metric (meters) in the ego frame with the sensor at the
origin. All operations are pure functions: they never mutate their inputs,
and every seeded operation is reproducible from its seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PointCloud:
    """Ordered set of 3-D points with an optional per-point intensity channel."""

    points: np.ndarray
    intensity: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("points contain NaN or Inf")
        object.__setattr__(self, "points", pts)
        if self.intensity is not None:
            inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if len(inten) != len(pts):
                raise ValueError(
                    f"intensity length {len(inten)} != point count {len(pts)}"
                )
            if not np.isfinite(inten).all():
                raise ValueError("intensity contains NaN or Inf")
            object.__setattr__(self, "intensity", inten)

    def __len__(self) -> int:
        return len(self.points)

    def take(self, idx: np.ndarray) -> "PointCloud":
        """Sub-cloud at the given indices, intensity carried along."""
        inten = self.intensity[idx] if self.intensity is not None else None
        return PointCloud(self.points[idx], inten)

    def with_points(self, points: np.ndarray) -> "PointCloud":
        """Same-cardinality cloud with replaced coordinates."""
        pts = np.asarray(points, dtype=np.float64)
        if len(pts) != len(self):
            raise ValueError("with_points requires identical cardinality")
        return PointCloud(pts, self.intensity)


@dataclass(frozen=True)
class VoxelGrid:
    """Occupancy set over a fixed-resolution lattice anchored at ``origin``."""

    resolution: float
    origin: np.ndarray
    occupied: frozenset

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        origin.setflags(write=False)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "occupied", frozenset(self.occupied))

    def __len__(self) -> int:
        return len(self.occupied)


def range_crop(pc: PointCloud, max_range: float) -> PointCloud:
    """Keep points whose 3-D Euclidean norm from the origin is <= max_range.

    Order is preserved; the output may be empty.
    """
    if max_range <= 0:
        raise ValueError("max_range must be positive")
    norms = np.linalg.norm(pc.points, axis=1)
    return pc.take(np.flatnonzero(norms <= max_range))


def farthest_point_sample(pc: PointCloud, n: int, seed=None) -> PointCloud:
    """Greedy max-min-distance subset of n points.

    The first point is a seeded uniform draw; each subsequent pick maximizes
    the minimum distance to the already-selected set, lowest index winning
    ties. Returns the input unchanged when it already has <= n points.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    m = len(pc)
    if m <= n:
        return pc
    rng = np.random.default_rng(seed)
    pts = pc.points
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = rng.integers(m)
    dist = np.linalg.norm(pts - pts[chosen[0]], axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        np.minimum(dist, np.linalg.norm(pts - pts[nxt], axis=1), out=dist)
    return pc.take(chosen)


def uniform_sample(pc: PointCloud, n: int, seed=None) -> PointCloud:
    """Seeded uniform draw of n points without replacement (identity if |pc| <= n)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(pc) <= n:
        return pc
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(pc), size=n, replace=False)
    return pc.take(idx)


def duplicate(pc: PointCloud, k: int) -> PointCloud:
    """Concatenate k exact copies of the cloud (no jitter); copy i of point j
    lands at index i*|pc| + j."""
    if k < 1:
        raise ValueError("duplication factor must be >= 1")
    if k == 1:
        return pc
    pts = np.tile(pc.points, (k, 1))
    inten = np.tile(pc.intensity, k) if pc.intensity is not None else None
    return PointCloud(pts, inten)


def disc_augment(
    pc: PointCloud, n_points: int, radius: float, ground_z: float, seed=None
) -> PointCloud:
    """Append points sampled area-uniformly from a flat horizontal disc.

    The disc is centered on the vertical axis at height ``ground_z``; sampling
    uses r = radius * sqrt(u) so density is uniform over the disc area.
    """
    if n_points < 0:
        raise ValueError("n_points must be >= 0")
    if radius <= 0:
        raise ValueError("radius must be positive")
    if n_points == 0:
        return pc
    rng = np.random.default_rng(seed)
    r = radius * np.sqrt(rng.random(n_points))
    theta = rng.random(n_points) * (2.0 * np.pi)
    disc = np.column_stack(
        [r * np.cos(theta), r * np.sin(theta), np.full(n_points, float(ground_z))]
    )
    pts = np.concatenate([pc.points, disc])
    inten = None
    if pc.intensity is not None:
        inten = np.concatenate([pc.intensity, np.zeros(n_points)])
    return PointCloud(pts, inten)


def estimate_ground_height(
    pc: PointCloud, horizontal_radius: float = 10.0, percentile: float = 5.0
) -> float:
    """Low z-percentile among points within a horizontal radius of the sensor.

    Falls back to the percentile over the whole cloud when no point lies
    within the radius.
    """
    if len(pc) == 0:
        return 0.0
    horiz = np.linalg.norm(pc.points[:, :2], axis=1)
    near = pc.points[horiz <= horizontal_radius, 2]
    zs = near if len(near) else pc.points[:, 2]
    return float(np.percentile(zs, percentile))


def voxelize(pc: PointCloud, resolution: float, origin=(0.0, 0.0, 0.0)) -> VoxelGrid:
    """Occupancy grid: the set of lattice cells floor((p - origin)/resolution)
    touched by at least one point."""
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    idx = np.floor((pc.points - origin) / resolution).astype(np.int64)
    return VoxelGrid(resolution, origin, frozenset(map(tuple, idx)))
