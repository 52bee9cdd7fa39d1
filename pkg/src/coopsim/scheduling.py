"""Cooperator selection policies and their per-ego memory.

Policies are lightweight estimators: hyper-parameters live in ``__init__`` so that
``get_params``/``set_params``/``clone`` work, and the learned part (bandit statistics,
last handshake table) is kept in an explicit :class:`PolicyState` owned by one ego.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import ClassVar, Iterable, Mapping, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .comms import argmax_id
from .sensing import VisibilityModel, fused_coverage
from .world import Frame


@dataclass
class PolicyState:
    """Memory of one ego across scheduling rounds."""

    counts: dict[str, int] = field(default_factory=dict)
    means: dict[str, float] = field(default_factory=dict)
    t: int = 0
    last_cooperator: Optional[str] = None
    last_gains: dict[str, float] = field(default_factory=dict)

    def copy(self) -> "PolicyState":
        return replace(self, counts=dict(self.counts), means=dict(self.means),
                       last_gains=dict(self.last_gains))


@dataclass(frozen=True)
class ScheduleDecision:
    ego_id: str
    chosen: tuple[str, ...]
    policy: str
    benchmarks: Mapping[str, float] = field(default_factory=dict)
    handshake: bool = False


class SchedulingPolicy(BaseEstimator):
    name: ClassVar[str] = "policy"
    uses_handshake: ClassVar[bool] = False

    def select(self, ego_id, candidates, frame, state, rng, benchmarks) -> tuple[list[str], dict]:
        raise NotImplementedError


def _closest(ego_id: str, candidates: Sequence[str], frame: Frame) -> str:
    ego = frame.agent(ego_id).pose
    def key(c):
        p = frame.agent(c).pose
        return (math.hypot(p.x - ego.x, p.y - ego.y), c)
    return min(candidates, key=key)


class NoFusion(SchedulingPolicy):
    name = "no_fusion"

    def select(self, ego_id, candidates, frame, state, rng, benchmarks):
        return [], {}


class ClosestAgent(SchedulingPolicy):
    name = "closest_agent"

    def select(self, ego_id, candidates, frame, state, rng, benchmarks):
        return [_closest(ego_id, candidates, frame)], {}


class SingleRandom(SchedulingPolicy):
    name = "single_random"

    def select(self, ego_id, candidates, frame, state, rng, benchmarks):
        return [candidates[int(rng.integers(len(candidates)))]], {}


class MultipleRandom(SchedulingPolicy):
    name = "multiple_random"

    def __init__(self, k: int = 2):
        self.k = k

    def select(self, ego_id, candidates, frame, state, rng, benchmarks):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        k = min(self.k, len(candidates))
        picks = rng.choice(len(candidates), size=k, replace=False)
        return [candidates[int(i)] for i in picks], {}


class FullCommunication(SchedulingPolicy):
    name = "full_communication"

    def select(self, ego_id, candidates, frame, state, rng, benchmarks):
        return list(candidates), {}


class HistoricalBest(SchedulingPolicy):
    """Pick the candidate with the best benchmark from the last handshake.

    Without any usable benchmark the nearest candidate is taken.
    """

    name = "historical_best"
    uses_handshake = True

    def select(self, ego_id, candidates, frame, state, rng, benchmarks):
        table = benchmarks if benchmarks is not None else state.last_gains
        usable = {c: table[c] for c in candidates if c in table}
        if not usable:
            return [_closest(ego_id, candidates, frame)], {}
        return [argmax_id(usable)], usable


class MassUcb(SchedulingPolicy):
    """UCB1 over candidates using the gains realised when cooperating.

    index = mean + beta * sqrt(2 ln t / n); candidates never tried go first.
    """

    name = "mass_ucb"

    def __init__(self, beta: float = 1.0):
        self.beta = beta

    def indices(self, candidates: Sequence[str], state: PolicyState) -> dict[str, float]:
        t = max(state.t, 1)
        return {
            c: state.means.get(c, 0.0) + self.beta * math.sqrt(2.0 * math.log(t) / state.counts[c])
            for c in candidates
        }

    def select(self, ego_id, candidates, frame, state, rng, benchmarks):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        fresh = [c for c in candidates if state.counts.get(c, 0) == 0]
        if fresh:
            return [fresh[0]], {}
        scores = self.indices(candidates, state)
        return [argmax_id(scores)], scores


POLICIES: dict[str, type[SchedulingPolicy]] = {
    cls.name: cls
    for cls in (NoFusion, ClosestAgent, SingleRandom, MultipleRandom, FullCommunication,
                HistoricalBest, MassUcb)
}


def make_policy(name: str, **params) -> SchedulingPolicy:
    try:
        cls = POLICIES[name]
    except KeyError:
        raise ValueError(f"unknown policy {name!r}; choose from {sorted(POLICIES)}") from None
    policy = cls(**params)
    if isinstance(policy, MultipleRandom) and policy.k < 1:
        raise ValueError("multiple_random needs k >= 1")
    if isinstance(policy, MassUcb) and not policy.beta >= 0:
        raise ValueError("mass_ucb needs beta >= 0")
    return policy


def policy_label(policy: SchedulingPolicy) -> str:
    params = policy.get_params()
    if not params:
        return policy.name
    return policy.name + "(" + ",".join(f"{k}={v}" for k, v in sorted(params.items())) + ")"


def schedule(
    policy: SchedulingPolicy,
    ego_id: str,
    candidates: Iterable[str],
    frame: Frame,
    state: PolicyState,
    rng_seed=None,
    benchmarks: Optional[Mapping[str, float]] = None,
) -> ScheduleDecision:
    """Choose cooperators for ``ego_id`` among ``candidates``.

    ``benchmarks`` carries the handshake replies for handshake-based policies; when it
    is omitted they fall back on the table stored in ``state``.
    """
    cands = sorted(set(candidates))
    if ego_id in cands:
        raise ValueError("candidates must exclude the ego")
    for c in cands:
        if not frame.agent(c).sensored:
            raise ValueError(f"candidate {c!r} has no sensor")
    label = policy_label(policy)
    if not cands:
        return ScheduleDecision(ego_id, (), label, {}, policy.uses_handshake and benchmarks is not None)
    rng = np.random.default_rng(rng_seed)
    chosen, used = policy.select(ego_id, cands, frame, state, rng, benchmarks)
    return ScheduleDecision(ego_id, tuple(chosen), label, dict(used),
                            policy.uses_handshake and benchmarks is not None)


def update_state(
    state: PolicyState, decision: ScheduleDecision, realized_gains: Mapping[str, float]
) -> PolicyState:
    """New state after one scheduling round with the gains the chosen cooperators delivered."""
    chosen = set(decision.chosen)
    extra = set(realized_gains) - chosen
    if extra:
        raise ValueError(f"gains reported for unchosen candidates {sorted(extra)}")
    missing = chosen - set(realized_gains)
    if missing:
        raise ValueError(f"no realised gain for chosen candidates {sorted(missing)}")
    new = state.copy()
    new.t += 1
    for c in decision.chosen:
        n = new.counts.get(c, 0) + 1
        mean = new.means.get(c, 0.0)
        new.counts[c] = n
        new.means[c] = mean + (float(realized_gains[c]) - mean) / n
    if decision.chosen:
        new.last_cooperator = decision.chosen[-1]
    if decision.handshake:
        new.last_gains.update(decision.benchmarks)
    return new


def exhaustive_coverages(
    ego_id: str,
    candidates: Sequence[str],
    frame: Frame,
    model: VisibilityModel,
    table=None,
) -> dict[frozenset, frozenset]:
    """Fused coverage for every one of the 2^M cooperator subsets."""
    cands = sorted(candidates)
    out = {}
    for r in range(len(cands) + 1):
        for combo in itertools.combinations(cands, r):
            out[frozenset(combo)] = fused_coverage(ego_id, combo, frame, model, table)
    return out


def best_single_by_enumeration(
    ego_id: str, candidates: Sequence[str], frame: Frame, model: VisibilityModel, table=None
) -> tuple[Optional[str], int]:
    """Best single cooperator and its coverage size, found by enumerating all subsets."""
    cover = exhaustive_coverages(ego_id, candidates, frame, model, table)
    singles = {next(iter(s)): len(v) for s, v in cover.items() if len(s) == 1}
    if not singles:
        return None, len(cover[frozenset()])
    best = argmax_id(singles)
    return best, singles[best]
