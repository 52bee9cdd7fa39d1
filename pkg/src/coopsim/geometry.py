"""Vectorised bird's-eye-view geometry: rectangle footprints and segment tests."""
from __future__ import annotations

import math

import numpy as np

TWO_PI = 2.0 * math.pi
_EPS = 1e-12


def normalize_angle(angle: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    if -math.pi <= angle < math.pi:
        return angle
    wrapped = (angle + math.pi) % TWO_PI - math.pi
    # float modulo can land exactly on +pi for inputs just below -pi
    if wrapped >= math.pi:
        wrapped -= TWO_PI
    return wrapped


def rect_corners(cx, cy, yaw, length, width) -> np.ndarray:
    """Counter-clockwise corners of oriented rectangles.

    Scalars give a (4, 2) array, equal-length 1-D arrays give (N, 4, 2).
    """
    cx, cy, yaw, length, width = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (cx, cy, yaw, length, width))
    )
    hl, hw = length / 2.0, width / 2.0
    local = np.stack(
        [
            np.stack([hl, -hw], axis=-1),
            np.stack([hl, hw], axis=-1),
            np.stack([-hl, hw], axis=-1),
            np.stack([-hl, -hw], axis=-1),
        ],
        axis=-2,
    )
    c, s = np.cos(yaw)[..., None], np.sin(yaw)[..., None]
    x = c * local[..., 0] - s * local[..., 1] + cx[..., None]
    y = s * local[..., 0] + c * local[..., 1] + cy[..., None]
    return np.stack([x, y], axis=-1)


def perimeter_samples(corners: np.ndarray, k: int) -> np.ndarray:
    """K points spread over the four edges of each rectangle, corners first.

    Each edge receives k // 4 points (the first k % 4 edges one extra), placed at
    equal fractions along the edge starting from its leading corner, so k=8 yields
    the four corners plus the four edge midpoints.
    """
    if k < 4:
        raise ValueError("need at least 4 boundary samples")
    corners = np.asarray(corners, dtype=float)
    per_edge = [k // 4 + (1 if e < k % 4 else 0) for e in range(4)]
    pts = []
    for e, n in enumerate(per_edge):
        a = corners[..., e, :]
        b = corners[..., (e + 1) % 4, :]
        for j in range(n):
            t = j / n
            pts.append(a + t * (b - a))
    return np.stack(pts, axis=-2)


def _cross(ox, oy, ax, ay, bx, by):
    return (ax - ox) * (by - oy) - (ay - oy) * (bx - ox)


def points_in_rects(points: np.ndarray, rects: np.ndarray) -> np.ndarray:
    """Strict interior test of (N, 2) points against (P, 4, 2) CCW rectangles -> (N, P)."""
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    rects = np.asarray(rects, dtype=float).reshape(-1, 4, 2)
    px = points[:, None, None, 0]
    py = points[:, None, None, 1]
    ax, ay = rects[None, :, :, 0], rects[None, :, :, 1]
    bx, by = np.roll(rects, -1, axis=1)[None, :, :, 0], np.roll(rects, -1, axis=1)[None, :, :, 1]
    side = _cross(ax, ay, bx, by, px, py)
    return np.all(side > _EPS, axis=-1)


def segments_blocked(starts: np.ndarray, ends: np.ndarray, rects: np.ndarray) -> np.ndarray:
    """Whether each segment passes through each rectangle -> (N, P) bool.

    A segment is blocked by a rectangle when it properly crosses one of its edges or
    when an endpoint or the midpoint lies strictly inside it. Grazing contact (touching
    an edge or a corner) does not block.
    """
    starts = np.asarray(starts, dtype=float).reshape(-1, 2)
    ends = np.asarray(ends, dtype=float).reshape(-1, 2)
    rects = np.asarray(rects, dtype=float).reshape(-1, 4, 2)
    n, p = len(starts), len(rects)
    if n == 0 or p == 0:
        return np.zeros((n, p), dtype=bool)
    px, py = starts[:, None, None, 0], starts[:, None, None, 1]
    qx, qy = ends[:, None, None, 0], ends[:, None, None, 1]
    nxt = np.roll(rects, -1, axis=1)
    ax, ay = rects[None, :, :, 0], rects[None, :, :, 1]
    bx, by = nxt[None, :, :, 0], nxt[None, :, :, 1]
    d1 = _cross(ax, ay, bx, by, px, py)
    d2 = _cross(ax, ay, bx, by, qx, qy)
    d3 = _cross(px, py, qx, qy, ax, ay)
    d4 = _cross(px, py, qx, qy, bx, by)
    crosses = (((d1 > _EPS) & (d2 < -_EPS)) | ((d1 < -_EPS) & (d2 > _EPS))) & (
        ((d3 > _EPS) & (d4 < -_EPS)) | ((d3 < -_EPS) & (d4 > _EPS))
    )
    blocked = crosses.any(axis=-1)
    blocked |= points_in_rects(starts, rects)
    blocked |= points_in_rects(ends, rects)
    blocked |= points_in_rects((starts + ends) / 2.0, rects)
    return blocked


def rects_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis test for two (4, 2) rectangles; touching counts as overlap."""
    for rect in (a, b):
        for i in range(2):
            edge = rect[i + 1] - rect[i]
            axis = np.array([-edge[1], edge[0]])
            pa = a @ axis
            pb = b @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True
