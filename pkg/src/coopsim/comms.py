"""V2X messages for the scheduling handshake and raw-data sharing, with byte accounting."""
from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, Optional, Union

import numpy as np

from .geometry import segments_blocked
from .sensing import footprints
from .world import Agent, Frame, Pose

FRAME_BUDGET_BYTES = 2 * 2**20
CONTROL_MESSAGE_BYTES = 64
BYTES_PER_POINT = 16  # x, y, z, intensity as float32
MIN_SHARE_BYTES = 1024
BROADCAST = "*"


class Stage(str, Enum):
    REQUEST = "request"
    COMPUTE = "compute"
    REPLY = "reply"
    SELECT = "select"
    SHARE = "share"


@dataclass(frozen=True)
class Request:
    frame_index: int
    ego_id: str
    ego_pose: Pose
    size_bytes: int = CONTROL_MESSAGE_BYTES

    sender = property(lambda self: self.ego_id)
    receiver = property(lambda self: BROADCAST)


@dataclass(frozen=True)
class BenchmarkReply:
    frame_index: int
    candidate_id: str
    ego_id: str
    benchmark: float
    size_bytes: int = CONTROL_MESSAGE_BYTES

    sender = property(lambda self: self.candidate_id)
    receiver = property(lambda self: self.ego_id)


@dataclass(frozen=True)
class DataShare:
    frame_index: int
    sender_id: str
    receiver_id: str
    payload: frozenset
    payload_bytes: int

    def __post_init__(self):
        if self.payload_bytes <= 0:
            raise ValueError("data shares carry a positive payload")

    sender = property(lambda self: self.sender_id)
    receiver = property(lambda self: self.receiver_id)
    size_bytes = property(lambda self: self.payload_bytes)


Message = Union[Request, BenchmarkReply, DataShare]


class BudgetExceeded(Exception):
    def __init__(self, needed: int, remaining: int):
        super().__init__(f"message of {needed} B exceeds remaining budget of {remaining} B")
        self.needed = needed
        self.remaining = remaining


@dataclass
class BandwidthBudget:
    """Per-ego, per-frame byte allowance. Single writer."""

    frame_index: int
    limit_bytes: int = FRAME_BUDGET_BYTES
    spent_bytes: int = 0

    @property
    def remaining(self) -> int:
        return self.limit_bytes - self.spent_bytes

    def charge(self, msg: Message) -> "BandwidthBudget":
        """Account for ``msg``; raises BudgetExceeded and leaves the budget untouched if it does not fit."""
        if msg.frame_index != self.frame_index:
            raise ValueError(f"message for frame {msg.frame_index} charged to frame {self.frame_index}")
        size = msg.size_bytes
        if self.spent_bytes + size > self.limit_bytes:
            raise BudgetExceeded(size, self.remaining)
        self.spent_bytes += size
        return self

    def try_charge(self, msg: Message) -> bool:
        try:
            self.charge(msg)
        except BudgetExceeded:
            return False
        return True


@dataclass(frozen=True)
class LogRecord:
    seq: int
    frame: int
    stage: str
    sender: str
    receiver: str
    bytes: int

    def to_json(self) -> str:
        return json.dumps(
            {"frame": self.frame, "stage": self.stage, "sender": self.sender,
             "receiver": self.receiver, "bytes": self.bytes, "seq": self.seq},
            sort_keys=True,
        )


class MessageLog:
    """Append-only message record; appends from several threads get a total order."""

    def __init__(self):
        self._lock = threading.Lock()
        self._records: list[LogRecord] = []

    def append(self, frame: int, stage: Stage, sender: str, receiver: str, nbytes: int) -> LogRecord:
        with self._lock:
            rec = LogRecord(len(self._records), frame, Stage(stage).value, sender, receiver, int(nbytes))
            self._records.append(rec)
            return rec

    def record(self, msg: Message, stage: Stage) -> LogRecord:
        return self.append(msg.frame_index, stage, msg.sender, msg.receiver, msg.size_bytes)

    @property
    def records(self) -> list[LogRecord]:
        with self._lock:
            return list(self._records)

    def __len__(self):
        return len(self._records)

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(rec.to_json() + "\n")

    @staticmethod
    def load(path) -> list[LogRecord]:
        out = []
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    d = json.loads(line)
                    out.append(LogRecord(d["seq"], d["frame"], d["stage"], d["sender"], d["receiver"], d["bytes"]))
        return out


def hit_fraction(sender: Agent, frame: Frame, n_rays: int = 360) -> float:
    """Share of evenly spaced horizontal rays that strike a footprint within sensor range."""
    if sender.sensor is None:
        raise ValueError(f"agent {sender.id!r} has no sensor")
    ids, rects = footprints(frame)
    keep = [i for i, oid in enumerate(ids) if oid != sender.id]
    if not keep:
        return 0.0
    angles = np.arange(n_rays) * (2.0 * math.pi / n_rays)
    origin = np.array([sender.pose.x, sender.pose.y])
    ends = origin + sender.sensor.range * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    starts = np.broadcast_to(origin, ends.shape)
    hits = segments_blocked(starts, ends, rects[keep]).any(axis=1)
    return float(hits.mean())


def payload_size(sender: Agent, frame: Frame, fraction: Optional[float] = None) -> int:
    """Bytes needed to share one sweep of the sender's returns from objects."""
    if sender.sensor is None:
        raise ValueError(f"agent {sender.id!r} has no sensor")
    if fraction is None:
        fraction = hit_fraction(sender, frame)
    raw = BYTES_PER_POINT * sender.sensor.points_per_sweep * fraction
    return max(MIN_SHARE_BYTES, int(round(raw)))


def _deliver_all(msg: Message) -> bool:
    return True


def run_handshake(
    ego_id: str,
    candidates: Iterable[str],
    frame: Frame,
    gain_fn: Callable[[str], float],
    log: Optional[MessageLog] = None,
    budget: Optional[BandwidthBudget] = None,
    deliver: Callable[[Message], bool] = _deliver_all,
) -> list[tuple[str, float]]:
    """Request / compute / reply / select exchange between an ego and its candidates.

    Returns (candidate_id, benchmark) for every reply that reached the ego, in
    candidate order. Control messages are charged to ``budget`` when given; a reply
    that does not fit is dropped.
    """
    cands = list(candidates)
    if ego_id in cands:
        raise ValueError("candidates must exclude the ego")
    if not cands:
        return []
    ego = frame.agent(ego_id)
    req = Request(frame.index, ego_id, ego.pose)
    if budget is not None:
        budget.charge(req)
    if log is not None:
        log.record(req, Stage.REQUEST)
    heard = [c for c in cands if deliver(req)]
    benchmarks = {}
    for c in heard:
        benchmarks[c] = gain_fn(c)
        if log is not None:
            log.append(frame.index, Stage.COMPUTE, c, ego_id, 0)
    replies = []
    for c in heard:
        msg = BenchmarkReply(frame.index, c, ego_id, benchmarks[c])
        if budget is not None and not budget.try_charge(msg):
            continue
        if log is not None:
            log.record(msg, Stage.REPLY)
        if deliver(msg):
            replies.append((c, msg.benchmark))
    if log is not None:
        best = argmax_id(dict(replies))
        log.append(frame.index, Stage.SELECT, ego_id, best or "", 0)
    return replies


def argmax_id(scores) -> Optional[str]:
    """Key of the largest value, ties to the smallest key; None when empty."""
    best = None
    for key in sorted(scores):
        if best is None or scores[key] > scores[best]:
            best = key
    return best


def share(
    sender: Agent,
    ego_id: str,
    frame: Frame,
    payload: frozenset,
    budget: BandwidthBudget,
    log: Optional[MessageLog] = None,
    nbytes: Optional[int] = None,
) -> bool:
    """Send one raw-data share to the ego; False when the budget refuses it."""
    msg = DataShare(frame.index, sender.id, ego_id, payload,
                    nbytes if nbytes is not None else payload_size(sender, frame))
    if not budget.try_charge(msg):
        return False
    if log is not None:
        log.record(msg, Stage.SHARE)
    return True
