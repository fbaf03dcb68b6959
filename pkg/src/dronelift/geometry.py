"""Planar geometry helpers shared by scenario validation and propagation.

Polygons are lists of (x, y) vertices in order, implicitly closed. All
lengths are meters.
"""

from __future__ import annotations

import math
from typing import Sequence

Point = tuple[float, float]

_EPS = 1e-12


def dist2(a: Sequence[float], b: Sequence[float]) -> float:
    return math.hypot(b[0] - a[0], b[1] - a[1])


def dist3(a: Sequence[float], b: Sequence[float]) -> float:
    return math.sqrt((b[0] - a[0]) ** 2 + (b[1] - a[1]) ** 2 + (b[2] - a[2]) ** 2)


def polygon_area(poly: Sequence[Point]) -> float:
    """Signed shoelace area (positive for counter-clockwise order)."""
    s = 0.0
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        s += x1 * y2 - x2 * y1
    return 0.5 * s


def polygon_centroid(poly: Sequence[Point]) -> Point:
    a = polygon_area(poly)
    if abs(a) < _EPS:
        xs = [p[0] for p in poly]
        ys = [p[1] for p in poly]
        return (sum(xs) / len(xs), sum(ys) / len(ys))
    cx = cy = 0.0
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        w = x1 * y2 - x2 * y1
        cx += (x1 + x2) * w
        cy += (y1 + y2) * w
    return (cx / (6.0 * a), cy / (6.0 * a))


def _segments_properly_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool:
    """True when the open segments cross (shared endpoints do not count)."""
    d1x, d1y = p2[0] - p1[0], p2[1] - p1[1]
    d2x, d2y = q2[0] - q1[0], q2[1] - q1[1]
    denom = d1x * d2y - d1y * d2x
    if abs(denom) < _EPS:
        return False
    t = ((q1[0] - p1[0]) * d2y - (q1[1] - p1[1]) * d2x) / denom
    u = ((q1[0] - p1[0]) * d1y - (q1[1] - p1[1]) * d1x) / denom
    return _EPS < t < 1.0 - _EPS and _EPS < u < 1.0 - _EPS


def polygon_is_simple(poly: Sequence[Point]) -> bool:
    """Non-self-intersecting check, O(n^2) over edge pairs."""
    n = len(poly)
    if n < 3:
        return False
    edges = [(poly[i], poly[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        a1, a2 = edges[i]
        if dist2(a1, a2) < _EPS:
            return False
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue  # adjacent edges share a vertex by construction
            b1, b2 = edges[j]
            if _segments_properly_intersect(a1, a2, b1, b2):
                return False
    return True


def point_in_polygon(x: float, y: float, poly: Sequence[Point]) -> bool:
    """Ray-casting test; boundary points may fall either way."""
    inside = False
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        if (y1 > y) != (y2 > y):
            xint = x1 + (y - y1) / (y2 - y1) * (x2 - x1)
            if x < xint:
                inside = not inside
    return inside


def segment_polygon_inside_intervals(
    p1: Point, p2: Point, poly: Sequence[Point]
) -> list[tuple[float, float]]:
    """Parameter intervals [t0, t1] of p1 + t*(p2-p1) lying inside `poly`."""
    ts = [0.0, 1.0]
    dx, dy = p2[0] - p1[0], p2[1] - p1[1]
    n = len(poly)
    for i in range(n):
        q1, q2 = poly[i], poly[(i + 1) % n]
        ex, ey = q2[0] - q1[0], q2[1] - q1[1]
        denom = dx * ey - dy * ex
        if abs(denom) < _EPS:
            continue
        t = ((q1[0] - p1[0]) * ey - (q1[1] - p1[1]) * ex) / denom
        u = ((q1[0] - p1[0]) * dy - (q1[1] - p1[1]) * dx) / denom
        if -_EPS <= u <= 1.0 + _EPS and 0.0 < t < 1.0:
            ts.append(t)
    ts.sort()
    out: list[tuple[float, float]] = []
    for a, b in zip(ts, ts[1:]):
        if b - a < 1e-9:
            continue
        mid = 0.5 * (a + b)
        if point_in_polygon(p1[0] + mid * dx, p1[1] + mid * dy, poly):
            if out and abs(out[-1][1] - a) < 1e-9:
                out[-1] = (out[-1][0], b)
            else:
                out.append((a, b))
    return out


def obstructed_length_3d(
    tx: Sequence[float], rx: Sequence[float], poly: Sequence[Point], height: float
) -> float:
    """Length of the 3-D segment tx->rx shadowed by a building.

    The building is the footprint polygon extruded from ground to `height`;
    the returned value is the 3-D length of the portion of the line of sight
    whose horizontal projection is inside the footprint while its altitude is
    below the roof.
    """
    seg3d = dist3(tx, rx)
    if seg3d < _EPS:
        inside = point_in_polygon(tx[0], tx[1], poly)
        return 0.0
    z1, z2 = tx[2], rx[2]
    total_t = 0.0
    for t0, t1 in segment_polygon_inside_intervals((tx[0], tx[1]), (rx[0], rx[1]), poly):
        dz = z2 - z1
        if abs(dz) < _EPS:
            if z1 < height:
                total_t += t1 - t0
        else:
            th = (height - z1) / dz
            if dz > 0:
                lo, hi = t0, min(t1, th)
            else:
                lo, hi = max(t0, th), t1
            if hi > lo:
                total_t += hi - lo
    return total_t * seg3d
