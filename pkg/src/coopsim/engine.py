"""Scenario generation, waypoint kinematics and the barrier-synchronised tick loop."""
from __future__ import annotations

import bisect
import csv
import io
import logging
import math
import time
from concurrent.futures import Executor, ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .geometry import normalize_angle, rect_corners, rects_overlap
from .sensing import VisibilityModel, footprints, fused_coverage, visibility_table, visible_objects
from .templates import (
    CYCLE_OFFSET,
    JUNCTION_RADIUS,
    SceneKind,
    arms,
    curb_lines,
    routes,
    rsu_slots,
    sidewalk_lines,
)
from .world import (
    AGENT_SIZES,
    FRAME_INTERVAL,
    TICK_INTERVAL,
    TICKS_PER_FRAME,
    Agent,
    AgentKind,
    Frame,
    ObjectBox,
    ObjectClass,
    Pose,
    Scene,
    SensorConfig,
)

log = logging.getLogger(__name__)

VEHICLE_SPEED = 8.0
CYCLIST_SPEED = 4.0
PEDESTRIAN_SPEED = 1.4
HEADING_BLEND = 2.0
SPAWN_TRIES = 200
SPAWN_MARGIN = 0.5
OBJECT_MIX = ((ObjectClass.VEHICLE, 0.4), (ObjectClass.PEDESTRIAN, 0.35), (ObjectClass.CYCLIST, 0.25))
OBJECT_SIZES = {
    ObjectClass.VEHICLE: (4.6, 2.0, 1.6),
    ObjectClass.PEDESTRIAN: (0.6, 0.6, 1.8),
    ObjectClass.CYCLIST: (1.8, 0.7, 1.7),
}
# observation model used by the agents' own perception jobs while driving
DRIVING_VIEW = VisibilityModel(range=30.0, samples_per_box=4, require_fraction=0.25)


class InfeasibleSpawnError(RuntimeError):
    pass


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    scene_kind: SceneKind = SceneKind.INTERSECTION
    center: Pose = Pose(0.0, 0.0)
    spawn_rect: tuple[float, float] = (80.0, 80.0)
    counts: Mapping[AgentKind, int] = field(default_factory=dict)
    n_objects: int = 20
    duration: float = 20.0
    seed: int = 0
    name: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "scene_kind", SceneKind(self.scene_kind))
        object.__setattr__(self, "counts", {AgentKind(k): int(v) for k, v in dict(self.counts).items()})
        if any(v < 0 for v in self.counts.values()) or self.n_objects < 0:
            raise ValueError("counts must be >= 0")
        if min(self.spawn_rect) <= 0:
            raise ValueError("spawn_rect sides must be > 0")
        frames = self.duration / FRAME_INTERVAL
        if self.duration < 0 or abs(frames - round(frames)) > 1e-9:
            raise ValueError(f"duration must be a non-negative multiple of {FRAME_INTERVAL} s")

    def count(self, kind: AgentKind) -> int:
        return self.counts.get(AgentKind(kind), 0)

    @property
    def n_frames(self) -> int:
        return int(round(self.duration / FRAME_INTERVAL))

    @property
    def scene_id(self) -> str:
        return self.name or f"{self.scene_kind.value}-{self.seed:06d}"

    def to_dict(self) -> dict:
        return {
            "scene_kind": self.scene_kind.value,
            "center": [self.center.x, self.center.y, self.center.z, self.center.yaw],
            "spawn_rect": list(self.spawn_rect),
            "counts": {k.value: self.counts[k] for k in sorted(self.counts, key=lambda k: k.value)},
            "n_objects": self.n_objects,
            "duration": self.duration,
            "seed": self.seed,
            "name": self.name,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScenarioConfig":
        return cls(
            scene_kind=d["scene_kind"],
            center=Pose(*d.get("center", (0.0, 0.0, 0.0, 0.0))),
            spawn_rect=tuple(d.get("spawn_rect", (80.0, 80.0))),
            counts=d.get("counts", {}),
            n_objects=d.get("n_objects", 0),
            duration=d.get("duration", 20.0),
            seed=d.get("seed", 0),
            name=d.get("name"),
        )


class Waypath:
    """Piecewise-linear path with a target speed per segment."""

    def __init__(self, waypoints: Sequence[tuple[float, float]], speeds: Sequence[float] | float):
        pts = np.asarray(waypoints, dtype=float).reshape(-1, 2)
        if len(pts) < 1:
            raise ValueError("a path needs at least one waypoint")
        seg = np.diff(pts, axis=0)
        lengths = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(lengths <= 0):
            raise ValueError("consecutive waypoints must be distinct")
        if np.isscalar(speeds):
            speeds = [float(speeds)] * max(len(pts) - 1, 1)
        speeds = [float(v) for v in speeds]
        if any(v < 0 for v in speeds):
            raise ValueError("speeds must be >= 0")
        self.points = pts
        self.speeds = tuple(speeds)
        self.cum = np.concatenate([[0.0], np.cumsum(lengths)])
        self.headings = np.arctan2(seg[:, 1], seg[:, 0]) if len(seg) else np.zeros(0)

    @property
    def length(self) -> float:
        return float(self.cum[-1])

    def segment(self, s: float) -> int:
        if len(self.points) == 1:
            return 0
        return min(max(bisect.bisect_right(self.cum, s) - 1, 0), len(self.points) - 2)

    def speed_at(self, s: float) -> float:
        if s >= self.length:
            return 0.0
        return self.speeds[self.segment(s)]

    def position(self, s: float) -> tuple[float, float]:
        if len(self.points) == 1:
            return float(self.points[0, 0]), float(self.points[0, 1])
        s = min(max(s, 0.0), self.length)
        i = self.segment(s)
        t = (s - self.cum[i]) / (self.cum[i + 1] - self.cum[i])
        p = self.points[i] + t * (self.points[i + 1] - self.points[i])
        return float(p[0]), float(p[1])

    def heading(self, s: float, fallback: float = 0.0) -> float:
        """Segment heading, blended linearly across each interior waypoint."""
        if len(self.points) == 1:
            return fallback
        s = min(max(s, 0.0), self.length)
        i = self.segment(s)
        h = float(self.headings[i])
        # blend with the previous / next segment near a corner
        if i > 0:
            b = min(HEADING_BLEND, (self.cum[i] - self.cum[i - 1]) / 2, (self.cum[i + 1] - self.cum[i]) / 2)
            d = s - self.cum[i]
            if d < b:
                prev = float(self.headings[i - 1])
                turn = normalize_angle(h - prev)
                return normalize_angle(prev + turn * (0.5 + 0.5 * d / b))
        if i + 1 < len(self.headings):
            b = min(HEADING_BLEND, (self.cum[i + 1] - self.cum[i]) / 2, (self.cum[i + 2] - self.cum[i + 1]) / 2)
            d = self.cum[i + 1] - s
            if d < b:
                nxt = float(self.headings[i + 1])
                turn = normalize_angle(nxt - h)
                return normalize_angle(h + turn * (0.5 - 0.5 * d / b))
        return h


@dataclass(frozen=True)
class Track:
    """Static description of one simulated entity."""

    id: str
    path: Waypath
    size: tuple[float, float, float]
    kind: Optional[AgentKind] = None
    cls: ObjectClass = ObjectClass.VEHICLE
    yaw: float = 0.0  # used for single-point (static) paths
    z: float = 0.0

    @property
    def is_agent(self) -> bool:
        return self.kind is not None

    @property
    def annotated(self) -> bool:
        return self.kind is not AgentKind.RSU


@dataclass(frozen=True)
class WorldState:
    tracks: tuple[Track, ...]
    s: tuple[float, ...]
    speed: tuple[float, ...]
    tick: int = 0

    @property
    def version(self) -> int:
        return self.tick

    @property
    def sim_time(self) -> float:
        return self.tick * TICK_INTERVAL

    def pose(self, i: int) -> Pose:
        tr = self.tracks[i]
        x, y = tr.path.position(self.s[i])
        yaw = tr.path.heading(self.s[i], tr.yaw)
        return Pose(x, y, tr.z, yaw)

    def to_frame(self, index: Optional[int] = None) -> Frame:
        if index is None:
            index = self.tick // TICKS_PER_FRAME
        agents, objects = [], []
        for i, tr in enumerate(self.tracks):
            pose = self.pose(i)
            vel = (self.speed[i] * math.cos(pose.yaw), self.speed[i] * math.sin(pose.yaw))
            if tr.is_agent:
                sensor = SensorConfig() if tr.kind.sensored else None
                agents.append(Agent(tr.id, tr.kind, pose, vel, sensor, tr.size))
            if tr.annotated:
                center = Pose(pose.x, pose.y, tr.size[2] / 2.0, pose.yaw)
                objects.append(ObjectBox(tr.id, tr.cls, center, tr.size, vel))
        return Frame(index, index * FRAME_INTERVAL, tuple(agents), tuple(objects))


def step(world: WorldState, dt: float = TICK_INTERVAL, commands: Optional[Mapping[str, float]] = None) -> WorldState:
    """Advance every track by one tick along its path.

    ``commands`` caps the speed of individual tracks; the segment target speed is
    always an upper bound.
    """
    if abs(dt - TICK_INTERVAL) > 1e-12:
        raise ValueError(f"the engine only steps in {TICK_INTERVAL} s ticks")
    new_s, new_v = [], []
    for tr, s in zip(world.tracks, world.s):
        v = tr.path.speed_at(s)
        if commands is not None and tr.id in commands:
            v = min(v, max(0.0, commands[tr.id]))
        s2 = min(s + v * dt, tr.path.length)
        new_s.append(s2)
        new_v.append(v)
    return WorldState(world.tracks, tuple(new_s), tuple(new_v), world.tick + 1)


def _local_to_world(center: Pose, x: float, y: float) -> tuple[float, float]:
    c, s = math.cos(center.yaw), math.sin(center.yaw)
    return center.x + c * x - s * y, center.y + s * x + c * y


def _in_rect(config: ScenarioConfig, wx: float, wy: float) -> bool:
    c = config.center
    dx, dy = wx - c.x, wy - c.y
    cs, sn = math.cos(-c.yaw), math.sin(-c.yaw)
    lx, ly = cs * dx - sn * dy, sn * dx + cs * dy
    w, h = config.spawn_rect
    return abs(lx) <= w / 2.0 and abs(ly) <= h / 2.0


class _Placer:
    def __init__(self):
        self.rects: list[np.ndarray] = []

    def fits(self, x, y, yaw, size) -> bool:
        r = rect_corners(x, y, yaw, size[0] + 2 * SPAWN_MARGIN, size[1] + 2 * SPAWN_MARGIN)
        return not any(rects_overlap(r, o) for o in self.rects)

    def add(self, x, y, yaw, size):
        self.rects.append(rect_corners(x, y, yaw, size[0], size[1]))


def _world_path(config: ScenarioConfig, local_pts, speed) -> Waypath:
    pts = [_local_to_world(config.center, x, y) for x, y in local_pts]
    return Waypath(pts, speed)


def _trim(path: Waypath, s0: float, speed) -> Waypath:
    """Sub-path starting at arc length s0."""
    i = path.segment(s0)
    start = path.position(s0)
    rest = [tuple(p) for p in path.points[i + 1:]]
    if rest and math.hypot(rest[0][0] - start[0], rest[0][1] - start[1]) < 1e-9:
        rest = rest[1:]
    if not rest:
        return Waypath([start], speed)
    return Waypath([start] + rest, speed)


def _spawn_on_path(config, rng, placer, candidates, size, speed, label) -> Waypath:
    """Pick a random start on one of the candidate paths, inside the rect and clear of others."""
    for _ in range(SPAWN_TRIES):
        path = candidates[int(rng.integers(len(candidates)))]
        s0 = float(rng.uniform(0.0, path.length))
        x, y = path.position(s0)
        if not _in_rect(config, x, y):
            continue
        yaw = path.heading(s0)
        if not placer.fits(x, y, yaw, size):
            continue
        placer.add(x, y, yaw, size)
        return _trim(path, s0, speed)
    raise InfeasibleSpawnError(f"could not place {label} after {SPAWN_TRIES} tries")


def layout_scene(config: ScenarioConfig) -> WorldState:
    """Initial world for a scenario: deterministic in ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    kind = config.scene_kind
    placer = _Placer()
    tracks: list[Track] = []

    for k, (x, y, yaw) in enumerate(rsu_slots(kind, config.count(AgentKind.RSU))):
        wx, wy = _local_to_world(config.center, x, y)
        size = AGENT_SIZES[AgentKind.RSU]
        placer.add(wx, wy, yaw + config.center.yaw, size)
        tracks.append(Track(f"rsu_{k:02d}", Waypath([(wx, wy)], 0.0), size, AgentKind.RSU,
                            yaw=normalize_angle(yaw + config.center.yaw), z=5.0))

    lanes = [_world_path(config, pts, VEHICLE_SPEED) for _, pts in routes(kind)]
    prefixes = {AgentKind.CONTROLLED_CAV: "cav_c", AgentKind.UNCONTROLLED_CAV: "cav_u",
                AgentKind.OBSTACLE: "obs_"}
    for ak, prefix in prefixes.items():
        size = AGENT_SIZES[ak]
        for k in range(config.count(ak)):
            tid = f"{prefix}{k:02d}"
            path = _spawn_on_path(config, rng, placer, lanes, size, VEHICLE_SPEED, tid)
            tracks.append(Track(tid, path, size, ak))

    classes = [c for c, _ in OBJECT_MIX]
    probs = np.array([p for _, p in OBJECT_MIX])
    drawn = rng.choice(len(classes), size=config.n_objects, p=probs / probs.sum())
    counters = {c: 0 for c in classes}
    curbs = [_world_path(config, [a.point(start, off), a.point(start + 80.0, off)], 0.0)
             for a, off, start in curb_lines(kind)]
    walks = []
    for a, off, start in sidewalk_lines(kind):
        out = [a.point(start, off), a.point(start + 120.0, off)]
        walks += [_world_path(config, out, PEDESTRIAN_SPEED),
                  _world_path(config, out[::-1], PEDESTRIAN_SPEED)]
    rides = [_world_path(config, [a.point(JUNCTION_RADIUS, CYCLE_OFFSET), a.point(200.0, CYCLE_OFFSET)],
                         CYCLIST_SPEED) for a in arms(kind)]
    for ci in drawn:
        cls = classes[int(ci)]
        size = OBJECT_SIZES[cls]
        tid = f"{cls.value[:3]}_{counters[cls]:03d}"
        counters[cls] += 1
        if cls is ObjectClass.VEHICLE:
            tracks.append(Track(tid, _spawn_on_path(config, rng, placer, curbs, size, 0.0, tid),
                                size, cls=cls))
        elif cls is ObjectClass.PEDESTRIAN:
            tracks.append(Track(tid, _spawn_on_path(config, rng, placer, walks, size, PEDESTRIAN_SPEED, tid),
                                size, cls=cls))
        else:
            tracks.append(Track(tid, _spawn_on_path(config, rng, placer, rides, size, CYCLIST_SPEED, tid),
                                size, cls=cls))

    n = len(tracks)
    speeds = tuple(t.path.speed_at(0.0) for t in tracks)
    return WorldState(tuple(tracks), (0.0,) * n, speeds, 0)


# ---------------------------------------------------------------- tick loop

def _observe(frame: Frame, agent_ids: Sequence[str], version: int, model: VisibilityModel):
    """Per-agent perception job; pure function of the frame snapshot."""
    out = []
    fp = footprints(frame)
    for aid in agent_ids:
        t0 = time.perf_counter()
        seen = visible_objects(frame.agent(aid), frame, model, _fp=fp)
        out.append((aid, version, seen, time.perf_counter() - t0))
    return out


def expert_commands(world: WorldState, frame: Frame, observations: Mapping[str, frozenset]) -> dict[str, float]:
    """Batched car-following for every vehicle agent, computed in one call.

    A vehicle slows for a same-direction vehicle ahead in its lane; sensored agents
    only react to vehicles they currently see.
    """
    idx = [i for i, t in enumerate(world.tracks) if t.is_agent and t.kind is not AgentKind.RSU]
    if not idx:
        return {}
    poses = [world.pose(i) for i in idx]
    xy = np.array([[p.x, p.y] for p in poses])
    yaw = np.array([p.yaw for p in poses])
    d = xy[None, :, :] - xy[:, None, :]
    c, s = np.cos(yaw)[:, None], np.sin(yaw)[:, None]
    ahead = c * d[..., 0] + s * d[..., 1]
    lateral = -s * d[..., 0] + c * d[..., 1]
    dyaw = np.abs((yaw[None, :] - yaw[:, None] + np.pi) % (2 * np.pi) - np.pi)
    moving = np.array([world.tracks[i].path.length > world.s[i] for i in idx])
    relevant = (ahead > 0.0) & (ahead < 20.0) & (np.abs(lateral) < 1.8) & (dyaw < math.radians(60))
    ids = [world.tracks[i].id for i in idx]
    cmds = {}
    for r, i in enumerate(idx):
        tr = world.tracks[i]
        mask = relevant[r].copy()
        mask[r] = False
        if tr.kind.sensored and tr.id in observations:
            seen = observations[tr.id]
            mask &= np.array([oid in seen for oid in ids])
        if not moving[r] or not mask.any():
            continue
        gap = float(ahead[r][mask].min())
        cmds[tr.id] = max(0.0, (gap - 7.0) * 1.0)
    return cmds


@dataclass
class TimingReport:
    rows: list[tuple[int, int, float]] = field(default_factory=list)  # tick, agents, wall_ms
    agent_costs_ms: list[float] = field(default_factory=list)

    @property
    def mean_tick_ms(self) -> float:
        return float(np.mean([r[2] for r in self.rows])) if self.rows else 0.0

    @property
    def mean_agent_ms(self) -> float:
        return float(np.mean(self.agent_costs_ms)) if self.agent_costs_ms else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tick", "agents", "wall_ms"])
        for tick, n, ms in self.rows:
            w.writerow([tick, n, f"{ms:.4f}"])
        return buf.getvalue()


def _chunks(items: Sequence[str], n: int) -> list[list[str]]:
    n = max(1, min(n, len(items)))
    return [list(items[k::n]) for k in range(n)]


def run_parallel(
    config: ScenarioConfig,
    worker_count: int = 1,
    backend: str = "thread",
    partial_log: Optional[str] = None,
    on_tick: Optional[Callable[[WorldState], None]] = None,
) -> tuple[Scene, TimingReport]:
    """Simulate a scenario with per-agent perception jobs fanned out to workers.

    Each tick: snapshot the world, run every sensored agent's job concurrently, wait for
    all of them (the barrier), then compute all driving commands in one batch and step
    the world on the coordinator. The resulting scene does not depend on worker_count.
    """
    if worker_count < 1:
        raise ValueError("worker_count must be >= 1")
    world = layout_scene(config)
    report = TimingReport()
    frames: list[Frame] = []
    n_ticks = config.n_frames * TICKS_PER_FRAME
    pool: Optional[Executor] = None
    if worker_count > 1:
        pool = (ProcessPoolExecutor if backend == "process" else ThreadPoolExecutor)(worker_count)
    sensored = [t.id for t in world.tracks if t.is_agent and t.kind.sensored]
    n_agents = sum(1 for t in world.tracks if t.is_agent)
    try:
        for _ in range(n_ticks):
            t0 = time.perf_counter()
            frame = world.to_frame()
            if world.tick % TICKS_PER_FRAME == 0:
                frames.append(frame)
            jobs = _chunks(sensored, worker_count)
            if pool is None:
                results = [_observe(frame, j, world.version, DRIVING_VIEW) for j in jobs if j]
            else:
                futures = [pool.submit(_observe, frame, j, world.version, DRIVING_VIEW) for j in jobs if j]
                results = [f.result() for f in futures]
            obs = {}
            for chunk in results:
                for aid, version, seen, cost in chunk:
                    if version != world.version:
                        raise SimulationError(f"agent {aid} observed version {version} at tick {world.tick}")
                    obs[aid] = seen
                    report.agent_costs_ms.append(cost * 1e3)
            cmds = expert_commands(world, frame, {k: obs[k] for k in sorted(obs)})
            if on_tick is not None:
                on_tick(world)
            world = step(world, TICK_INTERVAL, cmds)
            report.rows.append((world.tick - 1, n_agents, (time.perf_counter() - t0) * 1e3))
    except Exception as exc:
        if partial_log:
            with open(partial_log, "w") as fh:
                fh.write(report.to_csv())
        if isinstance(exc, SimulationError):
            raise
        raise SimulationError(f"worker failure at tick {world.tick}: {exc}") from exc
    finally:
        if pool is not None:
            pool.shutdown(wait=True)
    return Scene(config.scene_id, config, tuple(frames)), report


def generate_scene(config: ScenarioConfig) -> Scene:
    return run_parallel(config, 1)[0]


def filter_scenes(
    scenes: Iterable[Scene],
    min_length: int = 0,
    min_counts: Optional[Mapping[AgentKind, int]] = None,
    reward_fn: Optional[Callable[[Scene], float]] = None,
    reward_threshold: float = 0.0,
) -> list[Scene]:
    """Scenes that are long enough, have enough agents of each kind and score well enough."""
    if min_length < 0:
        raise ValueError("min_length must be >= 0")
    need = {AgentKind(k): int(v) for k, v in (min_counts or {}).items()}
    kept = []
    for sc in scenes:
        if len(sc.frames) < min_length:
            continue
        if need:
            first = sc.frames[0].agents if sc.frames else ()
            have = {k: sum(1 for a in first if a.kind is k) for k in AgentKind}
            if any(have[k] < v for k, v in need.items()):
                continue
        if reward_fn is not None and reward_fn(sc) < reward_threshold:
            continue
        kept.append(sc)
    return kept


def full_coverage_reward(model: VisibilityModel) -> Callable[[Scene], float]:
    """Stand-in scene reward: mean objects covered per ego under full communication."""
    def reward(scene: Scene) -> float:
        totals = []
        for fr in scene.frames:
            table = visibility_table(fr, model)
            ids = [a.id for a in fr.sensored_agents]
            for ego in ids:
                others = [c for c in ids if c != ego]
                totals.append(len(fused_coverage(ego, others, fr, model, table)))
        return float(np.mean(totals)) if totals else 0.0

    return reward
