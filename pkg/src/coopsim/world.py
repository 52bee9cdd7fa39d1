"""Agents, annotated objects, frames and per-ego samples."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import TYPE_CHECKING, Optional

from ._validation import check_finite, check_positive, check_unique
from .geometry import normalize_angle

if TYPE_CHECKING:
    from .engine import ScenarioConfig

FRAME_INTERVAL = 0.5
TICK_INTERVAL = 0.1
TICKS_PER_FRAME = 5
DEFAULT_VALID_RANGE = 50.0


class AgentKind(str, Enum):
    CONTROLLED_CAV = "controlled_cav"
    UNCONTROLLED_CAV = "uncontrolled_cav"
    RSU = "rsu"
    OBSTACLE = "obstacle"

    @property
    def sensored(self) -> bool:
        return self is not AgentKind.OBSTACLE


class ObjectClass(str, Enum):
    VEHICLE = "vehicle"
    PEDESTRIAN = "pedestrian"
    CYCLIST = "cyclist"


class UnknownAgentError(KeyError):
    pass


class NotSensoredError(ValueError):
    pass


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    z: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        check_finite("pose", self.x, self.y, self.z, self.yaw)
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))


@dataclass(frozen=True)
class SensorConfig:
    """LiDAR description; defaults are a 64-beam unit sampling at 20 Hz."""

    range: float = 200.0
    channels: int = 64
    points_per_second: int = 256_000
    fov_vertical: tuple[float, float] = (math.radians(-40.0), 0.0)
    rate: float = 20.0

    def __post_init__(self):
        check_positive("sensor range", self.range)
        check_positive("sensor rate", self.rate)
        if self.channels <= 0 or self.points_per_second <= 0:
            raise ValueError("channels and points_per_second must be positive")

    @property
    def points_per_sweep(self) -> float:
        return self.points_per_second / self.rate


# footprint (length, width, height) per agent kind
AGENT_SIZES = {
    AgentKind.CONTROLLED_CAV: (4.6, 2.0, 1.6),
    AgentKind.UNCONTROLLED_CAV: (4.6, 2.0, 1.6),
    AgentKind.OBSTACLE: (4.6, 2.0, 1.6),
    AgentKind.RSU: (0.6, 0.6, 5.0),
}


@dataclass(frozen=True)
class Agent:
    id: str
    kind: AgentKind
    pose: Pose
    velocity: tuple[float, float] = (0.0, 0.0)
    sensor: Optional[SensorConfig] = None
    size: tuple[float, float, float] = (4.6, 2.0, 1.6)

    def __post_init__(self):
        object.__setattr__(self, "kind", AgentKind(self.kind))
        if (self.sensor is not None) != self.kind.sensored:
            raise ValueError(f"agent {self.id!r}: sensor must be present iff kind is not obstacle")
        check_finite("agent velocity", *self.velocity)
        if min(self.size) <= 0:
            raise ValueError(f"agent {self.id!r}: size components must be > 0")

    @property
    def sensored(self) -> bool:
        return self.sensor is not None


@dataclass(frozen=True)
class ObjectBox:
    id: str
    cls: ObjectClass
    center: Pose
    size: tuple[float, float, float]
    velocity: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "cls", ObjectClass(self.cls))
        if len(self.size) != 3 or min(self.size) <= 0:
            raise ValueError(f"box {self.id!r}: size components must be > 0")
        check_finite("box size", *self.size)
        check_finite("box velocity", *self.velocity)

    @property
    def planar_distance(self) -> float:
        return math.hypot(self.center.x, self.center.y)


@dataclass(frozen=True)
class Frame:
    index: int
    sim_time: float
    agents: tuple[Agent, ...] = ()
    objects: tuple[ObjectBox, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        object.__setattr__(self, "objects", tuple(self.objects))
        if self.index < 0:
            raise ValueError("frame index must be >= 0")
        if not math.isclose(self.sim_time, self.index * FRAME_INTERVAL, abs_tol=1e-9):
            raise ValueError(f"frame {self.index}: sim_time must be index * {FRAME_INTERVAL}")
        check_unique("agent", (a.id for a in self.agents))
        check_unique("object", (o.id for o in self.objects))

    def agent(self, agent_id: str) -> Agent:
        for a in self.agents:
            if a.id == agent_id:
                return a
        raise UnknownAgentError(agent_id)

    @property
    def sensored_agents(self) -> tuple[Agent, ...]:
        return tuple(a for a in self.agents if a.sensored)


@dataclass(frozen=True)
class Scene:
    id: str
    config: Optional["ScenarioConfig"]
    frames: tuple[Frame, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        for i, fr in enumerate(self.frames):
            if fr.index != i:
                raise ValueError(f"scene {self.id!r}: frame indices must be contiguous from 0")
        counts = {len(fr.sensored_agents) for fr in self.frames}
        if len(counts) > 1:
            raise ValueError(f"scene {self.id!r}: sensored agent count varies across frames")

    @property
    def n_sensored(self) -> int:
        return len(self.frames[0].sensored_agents) if self.frames else 0


@dataclass(frozen=True)
class Sample:
    frame_index: int
    ego_id: str
    annotations: tuple[ObjectBox, ...] = ()
    valid: tuple[bool, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "annotations", tuple(self.annotations))
        if not self.valid:
            object.__setattr__(self, "valid", tuple(True for _ in self.annotations))
        if len(self.valid) != len(self.annotations):
            raise ValueError("one valid flag per annotation")


def _rotate(x: float, y: float, angle: float) -> tuple[float, float]:
    c, s = math.cos(angle), math.sin(angle)
    return c * x - s * y, s * x + c * y


def transform_to_ego(box: ObjectBox, ego: Pose) -> ObjectBox:
    """Express a world-frame box in the ego's coordinate frame."""
    check_finite("ego pose", ego.x, ego.y, ego.z, ego.yaw)
    x, y = _rotate(box.center.x - ego.x, box.center.y - ego.y, -ego.yaw)
    vel = _rotate(box.velocity[0], box.velocity[1], -ego.yaw)
    center = Pose(x, y, box.center.z - ego.z, box.center.yaw - ego.yaw)
    return replace(box, center=center, velocity=vel)


def transform_from_ego(box: ObjectBox, ego: Pose) -> ObjectBox:
    """Inverse of :func:`transform_to_ego`."""
    check_finite("ego pose", ego.x, ego.y, ego.z, ego.yaw)
    x, y = _rotate(box.center.x, box.center.y, ego.yaw)
    vel = _rotate(box.velocity[0], box.velocity[1], ego.yaw)
    center = Pose(x + ego.x, y + ego.y, box.center.z + ego.z, box.center.yaw + ego.yaw)
    return replace(box, center=center, velocity=vel)


def filter_valid(boxes, range: float = DEFAULT_VALID_RANGE) -> list[ObjectBox]:
    """Keep ego-frame boxes whose centre lies within ``range`` metres (inclusive)."""
    check_positive("range", range)
    return [b for b in boxes if b.planar_distance <= range]


def build_sample(frame: Frame, ego_id: str, range: float = DEFAULT_VALID_RANGE) -> Sample:
    ego = frame.agent(ego_id)
    if not ego.sensored:
        raise NotSensoredError(f"agent {ego_id!r} is an obstacle and has no samples")
    local = [transform_to_ego(o, ego.pose) for o in frame.objects if o.id != ego_id]
    return Sample(frame.index, ego_id, tuple(filter_valid(local, range)))


def build_samples(frame: Frame, range: float = DEFAULT_VALID_RANGE) -> list[Sample]:
    """One sample per sensored agent, in agent order."""
    return [build_sample(frame, a.id, range) for a in frame.sensored_agents]
