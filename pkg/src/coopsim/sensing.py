"""Geometric visibility oracle standing in for LiDAR plus a detector.

An object counts as seen by an agent when its centre is in range and enough points on
its footprint boundary have a clear straight line to the sensor, where any other
object or agent footprint can block the line.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional

import numpy as np

from ._validation import check_fraction, check_positive
from .geometry import perimeter_samples, points_in_rects, rect_corners, segments_blocked
from .world import DEFAULT_VALID_RANGE, Agent, Frame, NotSensoredError


@dataclass(frozen=True)
class VisibilityModel:
    range: float = DEFAULT_VALID_RANGE
    samples_per_box: int = 8
    require_fraction: float = 1.0 / 8.0

    def __post_init__(self):
        check_positive("visibility range", self.range)
        if self.samples_per_box < 4:
            raise ValueError("samples_per_box must be >= 4")
        check_fraction("require_fraction", self.require_fraction, low_open=True)

    @property
    def required_points(self) -> int:
        return max(1, math.ceil(self.require_fraction * self.samples_per_box - 1e-9))


def footprints(frame: Frame) -> tuple[list[str], np.ndarray]:
    """Ids and (P, 4, 2) corners of every footprint in the frame.

    Vehicle agents also appear as annotated objects under the same id; each id is
    listed once.
    """
    ids: list[str] = []
    rows = []
    for o in frame.objects:
        ids.append(o.id)
        rows.append((o.center.x, o.center.y, o.center.yaw, o.size[0], o.size[1]))
    known = set(ids)
    for a in frame.agents:
        if a.id not in known:
            ids.append(a.id)
            rows.append((a.pose.x, a.pose.y, a.pose.yaw, a.size[0], a.size[1]))
    if not rows:
        return ids, np.zeros((0, 4, 2))
    arr = np.asarray(rows, dtype=float)
    return ids, rect_corners(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4])


def _range_gate(agent: Agent, model: VisibilityModel) -> float:
    return min(model.range, agent.sensor.range) if agent.sensor else model.range


def objects_in_range(origin: Agent, frame: Frame, range: float) -> set[str]:
    ox, oy = origin.pose.x, origin.pose.y
    return {
        o.id
        for o in frame.objects
        if o.id != origin.id and math.hypot(o.center.x - ox, o.center.y - oy) <= range
    }


def visible_objects(agent: Agent, frame: Frame, model: VisibilityModel, _fp=None) -> frozenset[str]:
    if not agent.sensored:
        raise NotSensoredError(f"agent {agent.id!r} has no sensor")
    gate = _range_gate(agent, model)
    ox, oy = agent.pose.x, agent.pose.y
    targets = [
        o for o in frame.objects
        if o.id != agent.id and math.hypot(o.center.x - ox, o.center.y - oy) <= gate
    ]
    if not targets:
        return frozenset()
    ids, rects = _fp if _fp is not None else footprints(frame)
    col = {oid: j for j, oid in enumerate(ids)}
    # the agent's own body and any footprint its sensor sits inside cannot occlude
    ignore = points_in_rects(np.array([[ox, oy]]), rects)[0]
    if agent.id in col:
        ignore[col[agent.id]] = True
    # footprints entirely outside the reach of any sight line cannot occlude either
    centre = rects.mean(axis=1)
    radius = np.max(np.hypot(*(rects - centre[:, None, :]).transpose(2, 0, 1)), axis=1)
    reach = gate + float(radius.max(initial=0.0))
    ignore |= np.hypot(centre[:, 0] - ox, centre[:, 1] - oy) - radius > reach

    k = model.samples_per_box
    target_cols = np.array([col[o.id] for o in targets])
    starts = perimeter_samples(rects[target_cols], k).reshape(-1, 2)
    ends = np.broadcast_to(np.array([ox, oy]), starts.shape)
    active = np.flatnonzero(~ignore)
    blocked = segments_blocked(starts, ends, rects[active])
    # a target never occludes itself
    pos = np.full(len(rects), -1)
    pos[active] = np.arange(len(active))
    own = np.repeat(pos[target_cols], k)
    rows = np.flatnonzero(own >= 0)
    blocked[rows, own[rows]] = False
    clear = ~blocked.any(axis=1)
    counts = clear.reshape(len(targets), k).sum(axis=1)
    need = model.required_points
    return frozenset(o.id for o, c in zip(targets, counts) if c >= need)


def visibility_table(frame: Frame, model: VisibilityModel) -> dict[str, frozenset[str]]:
    """Visible-object sets for every sensored agent of the frame."""
    fp = footprints(frame)
    return {a.id: visible_objects(a, frame, model, _fp=fp) for a in frame.sensored_agents}


def fused_coverage(
    ego_id: str,
    cooperators: Iterable[str],
    frame: Frame,
    model: VisibilityModel,
    table: Optional[Mapping[str, frozenset[str]]] = None,
) -> frozenset[str]:
    """Union of what the ego and its cooperators see, restricted to the ego's range."""
    coops = list(cooperators)
    if ego_id in coops:
        raise ValueError("cooperators must exclude the ego")
    ego = frame.agent(ego_id)

    def seen(agent_id: str) -> frozenset[str]:
        if table is not None and agent_id in table:
            return table[agent_id]
        return visible_objects(frame.agent(agent_id), frame, model)

    union = set(seen(ego_id))
    if not coops:
        return frozenset(union)
    for c in coops:
        union |= seen(c)
    return frozenset(union & objects_in_range(ego, frame, _range_gate(ego, model)))


def perception_gain(
    ego_id: str,
    candidate_id: str,
    frame: Frame,
    model: VisibilityModel,
    table: Optional[Mapping[str, frozenset[str]]] = None,
) -> int:
    """Number of in-range objects the candidate adds to the ego's own view."""
    if candidate_id == ego_id:
        raise ValueError("candidate must differ from ego")
    alone = fused_coverage(ego_id, (), frame, model, table)
    return len(fused_coverage(ego_id, (candidate_id,), frame, model, table) - alone)


def gain_table(
    frame: Frame, model: VisibilityModel, table: Optional[Mapping[str, frozenset[str]]] = None
) -> dict[str, dict[str, int]]:
    """perception_gain for every ordered pair of sensored agents."""
    if table is None:
        table = visibility_table(frame, model)
    out: dict[str, dict[str, int]] = {}
    for ego in frame.sensored_agents:
        base = table[ego.id]
        in_range = objects_in_range(ego, frame, _range_gate(ego, model))
        out[ego.id] = {
            c.id: len((table[c.id] & in_range) - base)
            for c in frame.sensored_agents
            if c.id != ego.id
        }
    return out


@dataclass(frozen=True)
class CoopGraph:
    ids: tuple[str, ...]
    distance: np.ndarray
    occluded: np.ndarray

    def _idx(self, agent_id: str) -> int:
        return self.ids.index(agent_id)

    def dist(self, a: str, b: str) -> float:
        return float(self.distance[self._idx(a), self._idx(b)])

    def is_occluded(self, a: str, b: str) -> bool:
        return bool(self.occluded[self._idx(a), self._idx(b)])

    def to_dict(self) -> dict:
        return {
            "ids": list(self.ids),
            "distance": self.distance.tolist(),
            "occluded": self.occluded.astype(bool).tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CoopGraph":
        return cls(
            tuple(d["ids"]),
            np.asarray(d["distance"], dtype=float).reshape(len(d["ids"]), len(d["ids"])),
            np.asarray(d["occluded"], dtype=bool).reshape(len(d["ids"]), len(d["ids"])),
        )

    def __eq__(self, other):
        if not isinstance(other, CoopGraph):
            return NotImplemented
        return (
            self.ids == other.ids
            and np.array_equal(self.distance, other.distance)
            and np.array_equal(self.occluded, other.occluded)
        )


def coop_graph(frame: Frame, model: Optional[VisibilityModel] = None) -> CoopGraph:
    """Pairwise planar distances and line-of-sight blockage between agent origins."""
    agents = frame.agents
    if not agents:
        raise ValueError("coop_graph needs at least one agent")
    ids = tuple(a.id for a in agents)
    pos = np.array([[a.pose.x, a.pose.y] for a in agents], dtype=float)
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.hypot(diff[..., 0], diff[..., 1])
    n = len(agents)
    occluded = np.zeros((n, n), dtype=bool)
    fp_ids, rects = footprints(frame)
    for i in range(n):
        for j in range(i + 1, n):
            keep = [k for k, f in enumerate(fp_ids) if f not in (ids[i], ids[j])]
            if not keep:
                continue
            hit = segments_blocked(pos[i:i + 1], pos[j:j + 1], rects[keep]).any()
            occluded[i, j] = occluded[j, i] = bool(hit)
    return CoopGraph(ids, dist, occluded)
