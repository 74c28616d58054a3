"""Synthetic scenes so the full pipeline runs with no dataset download.

Provides a small procedural "room" (ground, walls, boxes, clutter) with a
sparse virtual-scan sampler that respects occlusion by keeping the nearest
return per angular bin, a two-Gaussian toy scene for training experiments,
and flat road-shaped template clouds for unconditional generation.
"""

from __future__ import annotations

import numpy as np

from .cloud import PointCloud


def _sample_rect(rng, n, corner, edge_u, edge_v):
    """n points uniform on the parallelogram corner + a*edge_u + b*edge_v."""
    a = rng.random(n)[:, None]
    b = rng.random(n)[:, None]
    return np.asarray(corner) + a * np.asarray(edge_u) + b * np.asarray(edge_v)


def _sample_box(rng, n, center, size):
    """n points uniform over the surface of an axis-aligned box."""
    cx, cy, cz = center
    sx, sy, sz = size
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.random(n) - 0.5
    v = rng.random(n) - 0.5
    pts = np.empty((n, 3))
    for f in range(6):
        m = face == f
        axis = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        rest = [i for i in range(3) if i != axis]
        pts[m, axis] = sign * 0.5
        pts[m, rest[0]] = u[m]
        pts[m, rest[1]] = v[m]
    return pts * np.array(size) + np.array(center)


def make_room_scene(seed=0, extent: float = 20.0, n_points: int = 60_000) -> PointCloud:
    """Dense cloud of a simple outdoor-ish scene inside [-extent, extent]^2.

    Half the budget goes to the ground plane, the rest to perimeter walls, a
    handful of boxes, and scattered clutter.
    """
    rng = np.random.default_rng(seed)
    e = float(extent)
    n_ground = n_points // 2
    n_wall = n_points // 6
    n_boxes = n_points - n_ground - 2 * n_wall

    ground = _sample_rect(rng, n_ground, (-e, -e, 0.0), (2 * e, 0, 0), (0, 2 * e, 0))
    wall_a = _sample_rect(rng, n_wall, (-e, -e, 0.0), (2 * e, 0, 0), (0, 0, 3.0))
    wall_b = _sample_rect(rng, n_wall, (-e, e, 0.0), (2 * e, 0, 0), (0, 0, 3.0))

    boxes = []
    n_each = n_boxes // 8
    for _ in range(8):
        center = np.array(
            [rng.uniform(-e + 3, e - 3), rng.uniform(-e + 3, e - 3), 0.0]
        )
        size = rng.uniform([1.0, 1.0, 0.8], [4.0, 4.0, 2.5])
        center[2] = size[2] / 2
        boxes.append(_sample_box(rng, n_each, center, size))
    clutter_n = n_boxes - 8 * n_each
    clutter = np.column_stack(
        [
            rng.uniform(-e, e, clutter_n),
            rng.uniform(-e, e, clutter_n),
            rng.uniform(0.0, 2.0, clutter_n),
        ]
    )
    return PointCloud(np.concatenate([ground, wall_a, wall_b, *boxes, clutter]))


def virtual_scan(
    scene: PointCloud,
    sensor_height: float = 1.7,
    n_azimuth: int = 720,
    n_rings: int = 24,
    seed=0,
) -> PointCloud:
    """Sparse occlusion-respecting sample of a dense scene.

    Bins every scene point by azimuth and elevation as seen from a sensor at
    (0, 0, sensor_height) and keeps the nearest return per bin, mimicking a
    spinning range sensor. A small seeded jitter decorrelates bin boundaries.
    """
    rng = np.random.default_rng(seed)
    rel = scene.points - np.array([0.0, 0.0, sensor_height])
    rng_xy = np.linalg.norm(rel[:, :2], axis=1)
    dist = np.linalg.norm(rel, axis=1)
    azim = np.arctan2(rel[:, 1], rel[:, 0])
    elev = np.arctan2(rel[:, 2], rng_xy)
    lo, hi = np.percentile(elev, [1, 99])
    az_bin = ((azim + np.pi) / (2 * np.pi) * n_azimuth).astype(np.int64) % n_azimuth
    el_bin = np.clip((elev - lo) / max(hi - lo, 1e-9) * n_rings, 0, n_rings - 1).astype(
        np.int64
    )
    key = az_bin * n_rings + el_bin
    jitter = rng.random(len(dist)) * 1e-9
    order = np.lexsort((dist + jitter, key))
    key_sorted = key[order]
    first = np.ones(len(key_sorted), dtype=bool)
    first[1:] = key_sorted[1:] != key_sorted[:-1]
    return scene.take(np.sort(order[first]))


def gaussian_mixture(
    n: int, centers, std: float = 0.35, weights=None, seed=None
) -> PointCloud:
    """n points from an isotropic Gaussian mixture with the given centers."""
    rng = np.random.default_rng(seed)
    centers = np.asarray(centers, dtype=np.float64)
    k = len(centers)
    weights = np.full(k, 1.0 / k) if weights is None else np.asarray(weights)
    comp = rng.choice(k, size=n, p=weights / weights.sum())
    pts = centers[comp] + std * rng.standard_normal((n, 3))
    return PointCloud(pts)


TWO_CLUSTER_CENTERS = np.array([[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
TWO_CLUSTER_STD = 0.35


def two_cluster_scene(n: int, seed=None) -> PointCloud:
    """Draw from the canonical two-cluster toy distribution."""
    return gaussian_mixture(n, TWO_CLUSTER_CENTERS, TWO_CLUSTER_STD, seed=seed)


def two_cluster_observed(n: int, seed=None) -> PointCloud:
    """Sparse observation covering only the first (left) cluster; the second
    cluster is the occluded hole completion should fill."""
    return gaussian_mixture(n, TWO_CLUSTER_CENTERS[:1], TWO_CLUSTER_STD, seed=seed)


def hole_region_mask(points: np.ndarray, radius: float = 0.75) -> np.ndarray:
    """Boolean mask of points inside the occluded-cluster ball."""
    return np.linalg.norm(points - TWO_CLUSTER_CENTERS[1], axis=1) <= radius


GENERATION_TEMPLATES = ("straight", "crossing", "turn")


def template_cloud(name: str, n: int = 180_000, seed=0, extent: float = 45.0) -> PointCloud:
    """Flat road-shaped template for unconditional generation.

    "straight" is a single strip, "crossing" two orthogonal strips, "turn" a
    quarter annulus; all at z = 0 with a small vertical jitter.
    """
    rng = np.random.default_rng(seed)
    half_w = 6.0
    if name == "straight":
        xy = np.column_stack(
            [rng.uniform(-extent, extent, n), rng.uniform(-half_w, half_w, n)]
        )
    elif name == "crossing":
        m = n // 2
        a = np.column_stack(
            [rng.uniform(-extent, extent, m), rng.uniform(-half_w, half_w, m)]
        )
        b = np.column_stack(
            [rng.uniform(-half_w, half_w, n - m), rng.uniform(-extent, extent, n - m)]
        )
        xy = np.concatenate([a, b])
    elif name == "turn":
        r = np.sqrt(rng.uniform((extent - 2 * half_w) ** 2, extent**2, n))
        theta = rng.uniform(0.0, np.pi / 2, n)
        xy = np.column_stack([r * np.cos(theta) - extent / 2, r * np.sin(theta) - extent / 2])
    else:
        raise ValueError(
            f"unknown template {name!r}; choose from {GENERATION_TEMPLATES}"
        )
    z = rng.normal(0.0, 0.02, n)
    return PointCloud(np.column_stack([xy, z]))
