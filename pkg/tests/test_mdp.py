"""Decision model: state space, transitions, solver, policy files, bridge.

The solver is checked against an independent finite-horizon dynamic program
written with plain dicts and tuples (no shared indexing or numpy code), run
long enough that the truncation error is far below the comparison band.
"""

from __future__ import annotations

import itertools
import math
from collections import defaultdict

import numpy as np
import pytest

from exitqueue.core import Constraint, ConstraintMode, ConstraintSet, ExitRequest, QueueState
from exitqueue.errors import ConfigError, IllegalAction, ModelMismatch
from exitqueue.mdp import (
    ArrivalModel,
    MdpState,
    OptimalMechanism,
    Policy,
    StateSpace,
    action_values,
    build_model,
    enumerate_states,
    legal_actions,
    load_policy,
    optimal_select,
    policy_text,
    queue_to_mdp_state,
    reward,
    save_policy,
    value_iteration,
)

FLAGSHIP = ArrivalModel(((0, 0.5), (1, 0.4), (5, 0.1)), 0.1, 1.0, 10.0)


def _oracle_values(model: ArrivalModel, cap, budget, window, gamma, horizon):
    """Finite-horizon DP over plain tuples; oracle for the solver."""
    hists = [
        h
        for h in itertools.product(range(budget + 1), repeat=window - 1)
        if sum(h) <= budget
    ]
    states = [
        (wl, wh, h)
        for wl in range(cap + 1)
        for wh in range(cap + 1)
        for h in hists
    ]
    q = model.high_prob
    succ = {}
    rew = {}
    for wl, wh, h in states:
        for a in range(budget - sum(h) + 1):
            high_left = max(wh - a, 0)
            low_left = max(wl - max(a - wh, 0), 0)
            rew[(wl, wh, h), a] = -(
                model.cost_high * high_left + model.cost_low * low_left
            )
            nh = (a,) + h[:-1] if window > 1 else ()
            branch: dict = defaultdict(float)
            for k, pk in model.count_dist:
                for j in range(k + 1):
                    pj = pk * math.comb(k, j) * q**j * (1 - q) ** (k - j)
                    if pj == 0.0:
                        continue
                    ns = (min(low_left + k - j, cap), min(high_left + j, cap), nh)
                    branch[ns] += pj
            succ[(wl, wh, h), a] = dict(branch)
    values = {s: 0.0 for s in states}
    for _ in range(horizon):
        values = {
            s: max(
                rew[s, a]
                + gamma * math.fsum(p * values[ns] for ns, p in succ[s, a].items())
                for a in range(budget - sum(s[2]) + 1)
            )
            for s in states
        }
    return values


# =============================================================
# Arrival model
# =============================================================


def test_arrival_model_validation() -> None:
    with pytest.raises(ConfigError):
        ArrivalModel((), 0.1, 1.0, 10.0)
    with pytest.raises(ConfigError):
        ArrivalModel(((0, 0.5), (0, 0.5)), 0.1, 1.0, 10.0)
    with pytest.raises(ConfigError):
        ArrivalModel(((0, 0.5), (1, 0.4)), 0.1, 1.0, 10.0)
    with pytest.raises(ConfigError):
        ArrivalModel(((0, 1.0),), 1.5, 1.0, 10.0)
    with pytest.raises(ConfigError):
        ArrivalModel(((0, 1.0),), 0.1, 10.0, 1.0)


def test_arrival_model_summaries() -> None:
    assert FLAGSHIP.max_count == 5
    assert FLAGSHIP.mean_count() == pytest.approx(0.9)
    assert FLAGSHIP.cost_class(1.0) == "low"
    assert FLAGSHIP.cost_class(10.0) == "high"
    with pytest.raises(ModelMismatch):
        FLAGSHIP.cost_class(2.0)


def test_arrival_model_determinism_flag() -> None:
    assert ArrivalModel(((0, 1.0),), 0.1, 1.0, 10.0).is_deterministic()
    assert ArrivalModel(((2, 1.0),), 1.0, 1.0, 10.0).is_deterministic()
    assert not ArrivalModel(((2, 1.0),), 0.5, 1.0, 10.0).is_deterministic()
    assert not FLAGSHIP.is_deterministic()


# =============================================================
# State space
# =============================================================


def test_enumeration_counts() -> None:
    assert len(enumerate_states(10, 5)) == 15246
    assert len(enumerate_states(0, 0)) == 1
    assert len(enumerate_states(1, 1)) == 20


def test_enumeration_rejects_bad_parameters() -> None:
    with pytest.raises(ConfigError):
        enumerate_states(-1, 5)
    with pytest.raises(ConfigError):
        enumerate_states(3, 2, window=0)


def test_legal_actions_examples() -> None:
    assert list(legal_actions(MdpState(0, 0, (0, 0, 0, 0)), 5)) == [0, 1, 2, 3, 4, 5]
    assert list(legal_actions(MdpState(3, 3, (5, 0, 0, 0)), 5)) == [0]
    assert list(legal_actions(MdpState(3, 3, (2, 1, 0, 0)), 5)) == [0, 1, 2]


def test_encode_decode_bijection() -> None:
    space = StateSpace(3, 2, window=3)
    for i, s in enumerate(space.states):
        assert space.encode(s) == i
        assert space.decode(i) == s
    with pytest.raises(ConfigError):
        space.encode(MdpState(0, 0, (2, 2)))
    with pytest.raises(ConfigError):
        space.encode(MdpState(4, 0, (0, 0)))


def test_encode_arrays_matches_scalar_encode() -> None:
    space = StateSpace(3, 2, window=3)
    rng = np.random.default_rng(0)
    wl = rng.integers(0, 7, size=200)  # above cap on purpose; arrays clamp
    wh = rng.integers(0, 7, size=200)
    hist_pool = [h for h in itertools.product(range(3), repeat=2) if sum(h) <= 2]
    hist = np.asarray([hist_pool[i] for i in rng.integers(0, len(hist_pool), 200)])
    coded = space.encode_arrays(wl, wh, hist)
    for i in range(200):
        expect = space.encode(
            MdpState(min(int(wl[i]), 3), min(int(wh[i]), 3), tuple(int(x) for x in hist[i]))
        )
        assert coded[i] == expect


# =============================================================
# Reward and transitions
# =============================================================


def test_reward_examples() -> None:
    assert reward(MdpState(10, 0, ()), 5, FLAGSHIP) == -5.0
    assert reward(MdpState(0, 0, ()), 0, FLAGSHIP) == 0.0
    # Highs are cleared first: one high and one low gone, one low stays.
    assert reward(MdpState(2, 1, ()), 2, FLAGSHIP) == -1.0
    with pytest.raises(IllegalAction):
        reward(MdpState(1, 1, ()), -1, FLAGSHIP)
    with pytest.raises(IllegalAction):
        reward(MdpState(1, 1, (2,)), 1, FLAGSHIP, budget=2)


def test_transition_rows_sum_to_one() -> None:
    model = build_model(FLAGSHIP, cap=4, budget=2, window=3)
    for a in range(3):
        sums = model.table.row_sums(a)
        assert np.max(np.abs(sums - 1.0)) < 1e-12


def test_transitions_without_arrivals_are_deterministic() -> None:
    quiet = ArrivalModel(((0, 1.0),), 0.0, 1.0, 10.0)
    model = build_model(quiet, cap=3, budget=2, window=2)
    space = model.space
    idx = space.encode(MdpState(2, 1, (0,)))
    rows = model.transitions(idx, 2)
    assert rows == [(space.encode(MdpState(1, 0, (2,))), 1.0)]
    assert model.transitions(space.encode(MdpState(0, 0, (2,))), 1) == []


def test_saturated_state_merges_all_mass() -> None:
    # At the cap with action 0, every arrival branch clamps back onto the
    # same successor, so the merged row is a single certain transition.
    model = build_model(FLAGSHIP, cap=10, budget=5, window=1)
    space = model.space
    rows = model.transitions(space.encode(MdpState(10, 10, ())), 0)
    assert rows == [(space.encode(MdpState(10, 10, ())), pytest.approx(1.0))]


def test_illegal_reward_lookup_raises() -> None:
    model = build_model(FLAGSHIP, cap=2, budget=1, window=2)
    idx = model.space.encode(MdpState(0, 0, (1,)))
    with pytest.raises(IllegalAction):
        model.reward_of(idx, 1)


# =============================================================
# Solver
# =============================================================


def test_single_absorbing_state_matches_geometric_sum() -> None:
    # One low request arrives every period and none can be processed, so
    # the pinned state earns -1 per period: value -1/(1-gamma) = -10.
    stuck = ArrivalModel(((1, 1.0),), 0.0, 1.0, 10.0)
    model = build_model(stuck, cap=1, budget=0, window=1, discount=0.9)
    policy = value_iteration(model, tolerance=1e-9)
    assert policy.value_of(MdpState(1, 0, ())) == pytest.approx(-10.0, abs=1e-7)
    assert policy.value_of(MdpState(0, 0, ())) == pytest.approx(-9.0, abs=1e-7)


def test_sweep_differences_contract() -> None:
    model = build_model(FLAGSHIP, cap=3, budget=2, window=3, discount=0.9)
    policy = value_iteration(model, tolerance=1e-9)
    diffs = policy.info.sweep_diffs
    assert policy.info.residual <= 0.9 * 1e-9
    # The geometric envelope holds up to float noise in the Bellman backups.
    for before, after in zip(diffs[1:], diffs[2:]):
        assert after <= 0.9 * before + 1e-13


def test_solver_matches_finite_horizon_oracle() -> None:
    cap, budget, window, gamma = 3, 2, 3, 0.9
    model = build_model(FLAGSHIP, cap, budget, window, discount=gamma)
    policy = value_iteration(model, tolerance=1e-9)
    # 0.9^200 < 1e-9, so truncation error is well below the 1e-6 band.
    oracle = _oracle_values(FLAGSHIP, cap, budget, window, gamma, horizon=200)
    assert set(oracle) == {(s.w_low, s.w_high, s.history) for s in model.space.states}
    worst = max(
        abs(policy.value_of(s) - oracle[(s.w_low, s.w_high, s.history)])
        for s in model.space.states
    )
    assert worst < 1e-6


def test_action_values_bound_the_policy() -> None:
    model = build_model(FLAGSHIP, cap=3, budget=2, window=3)
    policy = value_iteration(model, tolerance=1e-9)
    q = action_values(model, policy.values)
    greedy = np.argmax(q, axis=1)
    # The greedy action attains the state value, and illegal slots stay -inf.
    assert np.allclose(np.max(q, axis=1), policy.values, atol=1e-7)
    assert np.array_equal(greedy, policy.actions)
    for idx, s in enumerate(model.space.states):
        for a in range(model.space.budget + 1):
            legal = a in legal_actions(s, model.space.budget)
            assert np.isfinite(q[idx, a]) == legal


def test_solver_rejects_bad_tolerance_and_budgeted_iterations() -> None:
    from exitqueue.errors import NonConvergence

    model = build_model(FLAGSHIP, cap=2, budget=1, window=2)
    with pytest.raises(ConfigError):
        value_iteration(model, tolerance=0.0)
    with pytest.raises(NonConvergence):
        value_iteration(model, tolerance=1e-9, max_iterations=3)


# =============================================================
# Policy files
# =============================================================


def _tiny_policy() -> Policy:
    model = build_model(FLAGSHIP, cap=2, budget=2, window=2, discount=0.9)
    return value_iteration(model, tolerance=1e-9)


def test_policy_file_roundtrip(tmp_path) -> None:
    policy = _tiny_policy()
    path = tmp_path / "tiny.policy"
    save_policy(policy, path)
    back = load_policy(path)
    assert back.discount == policy.discount
    assert back.tolerance == policy.tolerance
    assert np.array_equal(back.actions, policy.actions)
    assert np.allclose(back.values, policy.values, atol=1e-9)
    # Rewriting the loaded policy reproduces the file byte for byte.
    assert policy_text(back) == path.read_text(encoding="ascii")


def test_load_policy_rejects_corruption(tmp_path) -> None:
    policy = _tiny_policy()
    path = tmp_path / "tiny.policy"
    save_policy(policy, path)
    lines = path.read_text(encoding="ascii").splitlines()

    def write(name, rows):
        p = tmp_path / name
        p.write_text("\n".join(rows) + "\n", encoding="ascii")
        return p

    with pytest.raises(ConfigError):
        load_policy(write("header.policy", ["who,what"] + lines[1:]))
    with pytest.raises(ModelMismatch):
        load_policy(write("short.policy", lines[:-1]))
    with pytest.raises(ModelMismatch):
        load_policy(write("dup.policy", lines[:-2] + [lines[-2], lines[-2]]))
    # Rows carry their own index, so reordering them is fine ...
    swapped = lines[:]
    swapped[3], swapped[4] = swapped[4], swapped[3]
    reordered = load_policy(write("order.policy", swapped))
    assert np.array_equal(reordered.actions, policy.actions)
    # ... but a row whose state cells disagree with its index is not.
    mangled = lines[:]
    parts = mangled[3].split(",")
    parts[1] = str(int(parts[1]) + 1)
    mangled[3] = ",".join(parts)
    with pytest.raises(ModelMismatch):
        load_policy(write("state.policy", mangled))
    bad_action = lines[:]
    parts = bad_action[3].split(",")
    parts[-2] = "9"
    bad_action[3] = ",".join(parts)
    with pytest.raises(ModelMismatch):
        load_policy(write("action.policy", bad_action))
    with pytest.raises(ConfigError):
        load_policy(write("garbled.policy", lines[:1] + ["a,b,c,d"] + lines[2:]))
    with pytest.raises(ConfigError):
        load_policy(tmp_path / "missing.policy")


# =============================================================
# Live-queue bridge
# =============================================================


def _queue(reqs, budget=2, window=2) -> QueueState:
    cs = ConstraintSet([Constraint(budget, window)])
    return QueueState.initial(cs, arrivals=reqs)


def test_queue_to_mdp_state_counts_and_clamps() -> None:
    reqs = [
        ExitRequest("a", 1, 1.0),
        ExitRequest("b", 1, 10.0),
        ExitRequest("c", 1, 1.0),
    ]
    state = _queue(reqs)
    m = queue_to_mdp_state(state, FLAGSHIP, cap=3, budget=2, window=2)
    assert m == MdpState(2, 1, (0,))
    clamped = queue_to_mdp_state(state, FLAGSHIP, cap=1, budget=2, window=2)
    assert clamped == MdpState(1, 1, (0,))


def test_queue_to_mdp_state_reverses_recent_history() -> None:
    cs = ConstraintSet([Constraint(2, 3)])
    state = QueueState(
        constraints=cs, period=4, waiting=(), processed_totals=(2, 0, 1)
    )
    m = queue_to_mdp_state(state, FLAGSHIP, cap=3, budget=2, window=3)
    assert m.history == (1, 0)


def test_optimal_select_takes_priority_prefix() -> None:
    model = build_model(FLAGSHIP, cap=3, budget=2, window=2, discount=0.9)
    policy = value_iteration(model, tolerance=1e-9)
    reqs = [
        ExitRequest("low1", 1, 1.0),
        ExitRequest("high", 1, 10.0),
        ExitRequest("low2", 1, 1.0),
    ]
    state = _queue(reqs, budget=2, window=2)
    chosen = optimal_select(policy, state, FLAGSHIP)
    want = policy.action_of(MdpState(2, 1, (0,)))
    assert len(chosen) == min(want, 3)
    if chosen:
        assert chosen[0].validator == "high"
    assert optimal_select(policy, _queue([], 2, 2), FLAGSHIP) == ()


def test_optimal_select_validates_the_queue() -> None:
    policy = _tiny_policy()
    with pytest.raises(ModelMismatch):
        optimal_select(policy, _queue([], budget=3, window=2), FLAGSHIP)
    odd_cost = _queue([ExitRequest("x", 1, 2.5)], budget=2, window=2)
    with pytest.raises(ModelMismatch):
        optimal_select(policy, odd_cost, FLAGSHIP)
    heavy = _queue([ExitRequest("x", 1, 1.0, stake=2)], budget=2, window=2)
    with pytest.raises(ModelMismatch):
        optimal_select(policy, heavy, FLAGSHIP)
    with pytest.raises(ModelMismatch):
        optimal_select(policy, _queue([], budget=2, window=2), FLAGSHIP, cap=5)


def test_optimal_mechanism_wrapper() -> None:
    policy = _tiny_policy()
    mech = OptimalMechanism(policy=policy, arrival_model=FLAGSHIP)
    assert mech.name == "optimal"
    cs = mech.model_constraints()
    assert (int(cs[0].delta), cs[0].window) == (2, 2)
    state = _queue([ExitRequest("high", 1, 10.0)], budget=2, window=2)
    assert mech.select(state) == optimal_select(policy, state, FLAGSHIP)
    with pytest.raises(ModelMismatch):
        mech.select(state, ConstraintSet([Constraint(1, 1)]))
