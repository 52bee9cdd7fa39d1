import math

import pytest

from coopsim.world import Agent, AgentKind, Frame, ObjectBox, ObjectClass, Pose, SensorConfig

CAR = (4.6, 2.0, 1.6)
PED = (0.6, 0.6, 1.8)


def cav(aid, x, y, yaw=0.0, kind=AgentKind.UNCONTROLLED_CAV):
    return Agent(aid, kind, Pose(x, y, 0.0, yaw), (0.0, 0.0), SensorConfig(), CAR)


def rsu(aid, x, y):
    return Agent(aid, AgentKind.RSU, Pose(x, y, 5.0, 0.0), (0.0, 0.0), SensorConfig(), (0.6, 0.6, 5.0))


def box(oid, x, y, yaw=0.0, size=CAR, cls=ObjectClass.VEHICLE, vel=(0.0, 0.0)):
    return ObjectBox(oid, cls, Pose(x, y, size[2] / 2, yaw), size, vel)


def frame_of(agents=(), objects=(), index=0, with_agent_boxes=True):
    objs = list(objects)
    if with_agent_boxes:
        objs = [box(a.id, a.pose.x, a.pose.y, a.pose.yaw, a.size) for a in agents
                if a.kind is not AgentKind.RSU] + objs
    return Frame(index, index * 0.5, tuple(agents), tuple(objs))


@pytest.fixture
def occlusion_layout():
    """Ego at the origin facing +x; a truck at 5 m hides a car at 10 m; a side agent sees it."""
    ego = cav("ego", 0.0, 0.0)
    side = cav("side", 10.0, 12.0, yaw=-math.pi / 2)
    truck = box("truck", 5.0, 0.0, size=(2.0, 6.0, 3.5))
    hidden = box("hidden", 10.0, 0.0, size=(2.0, 1.0, 1.5))
    return frame_of([ego, side], [truck, hidden])
