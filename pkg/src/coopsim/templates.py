"""Fixed lane skeletons for the five road layouts.

Every layout is a set of road arms radiating from the scene centre. Traffic keeps to
the right; a route enters along one arm's inbound lane and leaves along another arm's
outbound lane. All coordinates are local to the scene centre.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

LANE_WIDTH = 3.5
ROAD_LENGTH = 200.0
JUNCTION_RADIUS = 8.0
PARKING_OFFSET = 5.0
SIDEWALK_OFFSET = 7.5
CYCLE_OFFSET = 3.0
RING_RADIUS = 14.0
RING_ENTRY = 22.0


class SceneKind(str, Enum):
    INTERSECTION = "intersection"
    T_JUNCTION = "t_junction"
    HIGHWAY_RAMP = "highway_ramp"
    ROUNDABOUT = "roundabout"
    FIVE_WAY = "five_way"


ARM_ANGLES = {
    SceneKind.INTERSECTION: (0.0, 90.0, 180.0, 270.0),
    SceneKind.T_JUNCTION: (0.0, 90.0, 180.0),
    SceneKind.HIGHWAY_RAMP: (0.0, 180.0, 200.0),
    SceneKind.ROUNDABOUT: (0.0, 90.0, 180.0, 270.0),
    SceneKind.FIVE_WAY: (0.0, 72.0, 144.0, 216.0, 288.0),
}


@dataclass(frozen=True)
class Arm:
    angle: float  # radians, direction pointing away from the centre

    @property
    def out_dir(self):
        return math.cos(self.angle), math.sin(self.angle)

    @property
    def right(self):
        return math.sin(self.angle), -math.cos(self.angle)

    def point(self, s: float, offset: float):
        """Point at distance ``s`` from the centre, ``offset`` to the right of outbound travel."""
        ux, uy = self.out_dir
        nx, ny = self.right
        return (s * ux + offset * nx, s * uy + offset * ny)


def arms(kind: SceneKind) -> list[Arm]:
    return [Arm(math.radians(a)) for a in ARM_ANGLES[SceneKind(kind)]]


def _allowed(kind: SceneKind, i: int, j: int) -> bool:
    if i == j:
        return False
    if kind is SceneKind.HIGHWAY_RAMP:
        # the ramp (arm 2) only merges onto the eastbound carriageway
        return (i, j) in {(0, 1), (1, 0), (2, 0)}
    return True


def routes(kind: SceneKind) -> list[tuple[str, list[tuple[float, float]]]]:
    """Named vehicle routes as waypoint lists, in a fixed order."""
    kind = SceneKind(kind)
    arm_list = arms(kind)
    half = LANE_WIDTH / 2.0
    out = []
    for i, a in enumerate(arm_list):
        for j, b in enumerate(arm_list):
            if not _allowed(kind, i, j):
                continue
            if kind is SceneKind.ROUNDABOUT:
                pts = [a.point(ROAD_LENGTH, -half), a.point(RING_ENTRY, -half)]
                start = a.angle + 0.35
                end = b.angle - 0.35
                while end <= start:
                    end += 2 * math.pi
                n = max(2, int(math.ceil((end - start) / math.radians(20))))
                for k in range(n + 1):
                    th = start + (end - start) * k / n
                    pts.append((RING_RADIUS * math.cos(th), RING_RADIUS * math.sin(th)))
                pts += [b.point(RING_ENTRY, half), b.point(ROAD_LENGTH, half)]
            else:
                pts = [
                    a.point(ROAD_LENGTH, -half),
                    a.point(JUNCTION_RADIUS, -half),
                    b.point(JUNCTION_RADIUS, half),
                    b.point(ROAD_LENGTH, half),
                ]
            out.append((f"r{i}{j}", _dedupe(pts)))
    return out


def _dedupe(pts):
    clean = [pts[0]]
    for p in pts[1:]:
        if math.hypot(p[0] - clean[-1][0], p[1] - clean[-1][1]) > 1e-6:
            clean.append(p)
    return clean


def rsu_slots(kind: SceneKind, n: int) -> list[tuple[float, float, float]]:
    """Roadside positions (x, y, yaw) on the corners between neighbouring arms."""
    arm_list = arms(kind)
    angles = sorted(a.angle for a in arm_list)
    bisectors = []
    for k, th in enumerate(angles):
        nxt = angles[(k + 1) % len(angles)] + (2 * math.pi if k + 1 == len(angles) else 0.0)
        bisectors.append((th + nxt) / 2.0)
    base = RING_RADIUS + 12.0 if SceneKind(kind) is SceneKind.ROUNDABOUT else JUNCTION_RADIUS + 4.0
    slots = []
    ring = 0
    while len(slots) < n:
        r = base + 25.0 * ring
        for b in bisectors:
            if len(slots) == n:
                break
            slots.append((r * math.cos(b), r * math.sin(b), b + math.pi))
        ring += 1
    return slots


def curb_lines(kind: SceneKind):
    """(arm, offset, s_min) lines along which parked vehicles stand."""
    start = RING_ENTRY + 6.0 if SceneKind(kind) is SceneKind.ROUNDABOUT else JUNCTION_RADIUS + 6.0
    return [(a, side * PARKING_OFFSET, start) for a in arms(kind) for side in (1.0, -1.0)]


def sidewalk_lines(kind: SceneKind):
    start = RING_ENTRY + 2.0 if SceneKind(kind) is SceneKind.ROUNDABOUT else JUNCTION_RADIUS + 2.0
    return [(a, side * SIDEWALK_OFFSET, start) for a in arms(kind) for side in (1.0, -1.0)]
