import math

import numpy as np
import pytest
from sklearn.base import clone

from coopsim.scheduling import (
    POLICIES,
    ClosestAgent,
    FullCommunication,
    HistoricalBest,
    MassUcb,
    MultipleRandom,
    NoFusion,
    PolicyState,
    SingleRandom,
    best_single_by_enumeration,
    exhaustive_coverages,
    make_policy,
    policy_label,
    schedule,
    update_state,
)
from coopsim.sensing import VisibilityModel, fused_coverage, gain_table, visibility_table
from coopsim.world import Agent, AgentKind, Pose

from conftest import cav, frame_of
from test_sensing import random_frame

SELECTING = [ClosestAgent(), SingleRandom(), MultipleRandom(2), FullCommunication(), HistoricalBest(),
             MassUcb()]


def _frame(dists):
    """Ego at the origin, each candidate on the y axis at the signed distance given."""
    return frame_of([cav("ego", 0, 0)] + [cav(name, 0.0, d) for name, d in dists.items()])


@pytest.mark.parametrize("policy", SELECTING, ids=policy_label)
def test_forced_choice(policy):
    fr = _frame({"only": 10.0})
    dec = schedule(policy, "ego", ["only"], fr, PolicyState(), 0)
    assert dec.chosen == ("only",)


@pytest.mark.parametrize("policy", SELECTING + [NoFusion()], ids=policy_label)
def test_empty_candidates(policy):
    fr = _frame({})
    assert schedule(policy, "ego", [], fr, PolicyState(), 0).chosen == ()


def test_no_fusion_chooses_nothing():
    fr = _frame({"a": 5.0, "b": 9.0})
    assert schedule(NoFusion(), "ego", ["a", "b"], fr, PolicyState(), 0).chosen == ()


def test_closest_agent():
    fr = _frame({"a": 8.0, "b": 15.0, "c": -3.0})
    assert schedule(ClosestAgent(), "ego", ["a", "b", "c"], fr, PolicyState()).chosen == ("c",)


def test_closest_ties_to_smallest_id():
    fr = _frame({"b": 5.0, "a": -5.0})
    assert schedule(ClosestAgent(), "ego", ["b", "a"], fr, PolicyState()).chosen == ("a",)


def test_full_communication_takes_all():
    fr = _frame({"a": 5.0, "b": 9.0, "c": 12.0})
    assert schedule(FullCommunication(), "ego", ["c", "a", "b"], fr, PolicyState()).chosen == ("a", "b", "c")


def test_multiple_random_clips_and_is_distinct():
    fr = _frame({"a": 5.0, "b": 9.0, "c": 12.0})
    for seed in range(20):
        chosen = schedule(MultipleRandom(2), "ego", ["a", "b", "c"], fr, PolicyState(), seed).chosen
        assert len(set(chosen)) == 2 and set(chosen) <= {"a", "b", "c"}
    assert set(schedule(MultipleRandom(9), "ego", ["a", "b", "c"], fr, PolicyState(), 0).chosen) == {
        "a", "b", "c"}


def test_single_random_is_roughly_uniform():
    fr = _frame({"a": 5.0, "b": 9.0, "c": 12.0, "d": 30.0})
    counts = {c: 0 for c in "abcd"}
    n = 4000
    for seed in range(n):
        counts[schedule(SingleRandom(), "ego", list("abcd"), fr, PolicyState(), seed).chosen[0]] += 1
    # each count ~ Bin(4000, 1/4): sd ~ 27
    for v in counts.values():
        assert abs(v - n / 4) < 5 * math.sqrt(n * 0.25 * 0.75)


def test_random_policies_deterministic_in_seed():
    fr = _frame({c: 3.0 * (i + 1) for i, c in enumerate("abcdefgh")})
    for p in (SingleRandom(), MultipleRandom(3)):
        a = schedule(p, "ego", list("abcdefgh"), fr, PolicyState(), 42)
        b = schedule(p, "ego", list("abcdefgh"), fr, PolicyState(), 42)
        assert a == b
        # candidate order does not matter
        c = schedule(p, "ego", list("hgfedcba"), fr, PolicyState(), 42)
        assert a.chosen == c.chosen


def test_schedule_rejects_bad_candidates():
    fr = frame_of([cav("ego", 0, 0), Agent("obs", AgentKind.OBSTACLE, Pose(5, 0))])
    with pytest.raises(ValueError):
        schedule(ClosestAgent(), "ego", ["ego"], fr, PolicyState())
    with pytest.raises(ValueError):
        schedule(ClosestAgent(), "ego", ["obs"], fr, PolicyState())


def test_historical_best_uses_benchmarks():
    fr = _frame({"a": 5.0, "b": 9.0, "c": 12.0})
    dec = schedule(HistoricalBest(), "ego", list("abc"), fr, PolicyState(), benchmarks={"a": 1, "b": 4, "c": 4})
    assert dec.chosen == ("b",)
    assert dec.handshake


def test_historical_best_falls_back_to_closest():
    fr = _frame({"a": 5.0, "b": 2.0, "c": 12.0})
    dec = schedule(HistoricalBest(), "ego", list("abc"), fr, PolicyState())
    assert dec.chosen == ("b",) and not dec.handshake


def test_historical_best_scale_invariant():
    rng = np.random.default_rng(1)
    fr = _frame({c: 3.0 * (i + 1) for i, c in enumerate("abcdef")})
    for _ in range(50):
        gains = {c: int(v) for c, v in zip("abcdef", rng.integers(0, 6, 6))}
        base = schedule(HistoricalBest(), "ego", list("abcdef"), fr, PolicyState(), benchmarks=gains).chosen
        for k in (0.5, 3.0, 1000.0):
            scaled = {c: g * k for c, g in gains.items()}
            assert schedule(HistoricalBest(), "ego", list("abcdef"), fr, PolicyState(),
                            benchmarks=scaled).chosen == base


def test_ucb_example():
    state = PolicyState(counts={"A": 5, "B": 5}, means={"A": 2.0, "B": 1.0}, t=10)
    fr = _frame({"A": 5.0, "B": 9.0})
    p = MassUcb(beta=1.0)
    idx = p.indices(["A", "B"], state)
    bonus = math.sqrt(2 * math.log(10) / 5)
    assert bonus == pytest.approx(0.96, abs=0.01)
    assert idx == pytest.approx({"A": 2.0 + bonus, "B": 1.0 + bonus})
    assert schedule(p, "ego", ["A", "B"], fr, state).chosen == ("A",)


def test_ucb_pulls_fresh_candidates_first_in_id_order():
    fr = _frame({"a": 5.0, "b": 9.0, "c": 12.0})
    state = PolicyState(counts={"b": 3}, means={"b": 100.0}, t=3)
    assert schedule(MassUcb(), "ego", list("cba"), fr, state).chosen == ("a",)


def test_ucb_beta_zero_is_greedy():
    fr = _frame({"a": 5.0, "b": 9.0})
    state = PolicyState(counts={"a": 50, "b": 1}, means={"a": 1.0, "b": 0.9}, t=51)
    assert schedule(MassUcb(beta=0.0), "ego", ["a", "b"], fr, state).chosen == ("a",)
    assert schedule(MassUcb(beta=1.0), "ego", ["a", "b"], fr, state).chosen == ("b",)


def test_update_running_mean():
    fr = _frame({"A": 5.0})
    state = PolicyState(counts={"A": 1}, means={"A": 2.0}, t=1)
    dec = schedule(ClosestAgent(), "ego", ["A"], fr, state)
    new = update_state(state, dec, {"A": 4})
    assert new.means["A"] == 3.0 and new.counts["A"] == 2 and new.t == 2
    assert new.last_cooperator == "A"
    assert state.means["A"] == 2.0  # input untouched


def test_update_no_fusion_round():
    fr = _frame({"A": 5.0})
    state = PolicyState(counts={"A": 1}, means={"A": 2.0}, t=1)
    new = update_state(state, schedule(NoFusion(), "ego", ["A"], fr, state), {})
    assert new.t == 2 and new.counts == state.counts and new.means == state.means


def test_update_rejects_bad_gains():
    fr = _frame({"A": 5.0, "B": 7.0})
    dec = schedule(ClosestAgent(), "ego", ["A", "B"], fr, PolicyState())
    with pytest.raises(ValueError):
        update_state(PolicyState(), dec, {"A": 1, "B": 2})
    with pytest.raises(ValueError):
        update_state(PolicyState(), dec, {})


def test_update_merges_handshake_table_only():
    fr = _frame({"A": 5.0, "B": 7.0})
    dec = schedule(HistoricalBest(), "ego", ["A", "B"], fr, PolicyState(), benchmarks={"A": 2, "B": 5})
    new = update_state(PolicyState(), dec, {"B": 5})
    assert new.last_gains == {"A": 2, "B": 5}
    plain = schedule(ClosestAgent(), "ego", ["A", "B"], fr, PolicyState())
    assert update_state(PolicyState(), plain, {"A": 1}).last_gains == {}


def test_ucb_t_equals_total_pulls():
    fr = _frame({"a": 5.0, "b": 9.0, "c": 12.0})
    rng = np.random.default_rng(3)
    state = PolicyState()
    p = MassUcb()
    for _ in range(60):
        dec = schedule(p, "ego", list("abc"), fr, state)
        state = update_state(state, dec, {c: int(rng.integers(0, 5)) for c in dec.chosen})
    assert state.t == sum(state.counts.values()) == 60


def test_empirical_means_within_three_sigma():
    # every candidate observed every round; gains ~ Binomial(10, p)
    fr = _frame({"a": 5.0, "b": 9.0, "c": 12.0})
    probs = {"a": 0.2, "b": 0.5, "c": 0.7}
    rng = np.random.default_rng(11)
    state = PolicyState()
    rounds = 100
    for _ in range(rounds):
        dec = schedule(FullCommunication(), "ego", list("abc"), fr, state)
        state = update_state(state, dec, {c: int(rng.binomial(10, probs[c])) for c in dec.chosen})
    for c, p in probs.items():
        sd = math.sqrt(10 * p * (1 - p) / rounds)
        assert abs(state.means[c] - 10 * p) <= 3 * sd


def test_make_policy():
    assert set(POLICIES) == {"no_fusion", "closest_agent", "single_random", "multiple_random",
                             "full_communication", "historical_best", "mass_ucb"}
    assert make_policy("multiple_random", k=3).k == 3
    for bad in ({"name": "multiple_random", "k": 0}, {"name": "mass_ucb", "beta": -1.0}, {"name": "nope"}):
        with pytest.raises(ValueError):
            make_policy(**bad)
    with pytest.raises(TypeError):
        make_policy("closest_agent", k=2)


def test_estimator_params():
    p = MassUcb(beta=0.5)
    assert p.get_params() == {"beta": 0.5}
    q = clone(p).set_params(beta=2.0)
    assert q.beta == 2.0 and p.beta == 0.5
    assert policy_label(q) == "mass_ucb(beta=2.0)"
    assert policy_label(NoFusion()) == "no_fusion"


# ---------------------------------------------------------------- exhaustive oracle


@pytest.mark.parametrize("seed", range(10))
def test_historical_best_matches_enumeration(seed):
    model = VisibilityModel()
    fr = random_frame(300 + seed, n_agents=4, n_objects=20)
    table = visibility_table(fr, model)
    gains = gain_table(fr, model, table)
    for ego in table:
        cands = [c for c in table if c != ego]
        cover = exhaustive_coverages(ego, cands, fr, model, table)
        assert len(cover) == 2 ** len(cands)
        _, best = best_single_by_enumeration(ego, cands, fr, model, table)
        pick = schedule(HistoricalBest(), ego, cands, fr, PolicyState(), benchmarks=gains[ego]).chosen[0]
        assert len(fused_coverage(ego, [pick], fr, model, table)) == best


@pytest.mark.parametrize("seed", range(5))
def test_containment_per_policy(seed):
    model = VisibilityModel()
    fr = random_frame(400 + seed, n_agents=6, n_objects=25)
    table = visibility_table(fr, model)
    gains = gain_table(fr, model, table)
    for ego in table:
        cands = [c for c in table if c != ego]
        alone = fused_coverage(ego, [], fr, model, table)
        full = fused_coverage(ego, cands, fr, model, table)
        for p in SELECTING:
            chosen = schedule(p, ego, cands, fr, PolicyState(), seed, gains[ego]).chosen
            assert alone <= fused_coverage(ego, chosen, fr, model, table) <= full
