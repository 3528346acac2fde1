"""Exact decision model for a two-cost-class queue under one window constraint.

When costs take two values and the only constraint is a single absolute
(budget, window) pair, the queue collapses to a finite Markov decision
process: the state is the pair of waiting counts plus the last window-1
processed totals, and the action is how many requests to process this
period. This module enumerates that state space, builds the transition
structure, solves it by value iteration, and exposes the solved policy both
as a queue mechanism (``optimal_select`` / ``OptimalMechanism``) and as the
basis for marginal-externality payments (``vcg_payment``).

State conventions:
  * ``w_low``/``w_high`` are waiting counts clamped to ``cap`` (arrivals
    beyond the cap saturate in the model; the live queue keeps true counts
    and clamps only when looking up the policy).
  * ``history[j]`` is the number processed j+1 periods ago; legal actions
    satisfy sum(history) + a <= budget, which is exactly the sliding-window
    slack of the (budget, window) constraint.
  * Rewards are nonpositive: the negated waiting cost of whatever remains
    after the action, removing highest-cost requests first.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .core import (
    Constraint,
    ConstraintMode,
    ConstraintSet,
    ExitRequest,
    QueueState,
    step,
)
from .errors import (
    ConfigError,
    IllegalAction,
    ModelMismatch,
    NonConvergence,
    UnknownRequest,
)

__all__ = [
    "MdpState",
    "ArrivalModel",
    "StateSpace",
    "enumerate_states",
    "legal_actions",
    "reward",
    "build_transitions",
    "TransitionTable",
    "MdpModel",
    "build_model",
    "Policy",
    "SolveInfo",
    "value_iteration",
    "action_values",
    "policy_text",
    "save_policy",
    "load_policy",
    "queue_to_mdp_state",
    "optimal_select",
    "OptimalMechanism",
    "VcgEstimate",
    "vcg_estimate",
    "vcg_payment",
]

_PROB_TOL = 1e-9


class MdpState(NamedTuple):
    w_low: int
    w_high: int
    history: tuple[int, ...]


@dataclass(frozen=True)
class ArrivalModel:
    """Two-class arrival process: count distribution, class split, costs."""

    count_dist: tuple[tuple[int, float], ...]
    high_prob: float
    cost_low: float
    cost_high: float

    def __init__(self, count_dist, high_prob: float, cost_low: float, cost_high: float):
        object.__setattr__(self, "count_dist", tuple((int(k), float(p)) for k, p in count_dist))
        object.__setattr__(self, "high_prob", float(high_prob))
        object.__setattr__(self, "cost_low", float(cost_low))
        object.__setattr__(self, "cost_high", float(cost_high))
        if not self.count_dist:
            raise ConfigError("count distribution must be nonempty")
        ks = [k for k, _ in self.count_dist]
        if any(k < 0 for k in ks) or len(set(ks)) != len(ks):
            raise ConfigError(f"counts must be distinct nonnegative integers, got {ks}")
        if any(p < 0 for _, p in self.count_dist):
            raise ConfigError("count probabilities must be nonnegative")
        total = math.fsum(p for _, p in self.count_dist)
        if abs(total - 1.0) > _PROB_TOL:
            raise ConfigError(f"count probabilities sum to {total}, expected 1")
        if not 0.0 <= self.high_prob <= 1.0:
            raise ConfigError(f"high_prob must lie in [0,1], got {self.high_prob}")
        if not 0 < self.cost_low < self.cost_high:
            raise ConfigError(
                f"need 0 < cost_low < cost_high, got ({self.cost_low}, {self.cost_high})"
            )

    @property
    def max_count(self) -> int:
        return max(k for k, _ in self.count_dist)

    def mean_count(self) -> float:
        return math.fsum(k * p for k, p in self.count_dist)

    def is_deterministic(self) -> bool:
        """True when the next arrival batch is a single certain outcome."""
        live = [(k, p) for k, p in self.count_dist if p > 0.0]
        if len(live) != 1:
            return False
        k = live[0][0]
        return k == 0 or self.high_prob in (0.0, 1.0)

    def cost_class(self, cost: float) -> str:
        if cost == self.cost_low:
            return "low"
        if cost == self.cost_high:
            return "high"
        raise ModelMismatch(
            f"cost {cost} is neither cost_low={self.cost_low} nor cost_high={self.cost_high}"
        )


# =============================================================
# State space
# =============================================================


def _history_tuples(budget: int, length: int) -> list[tuple[int, ...]]:
    if length == 0:
        return [()]
    return [
        h
        for h in itertools.product(range(budget + 1), repeat=length)
        if sum(h) <= budget
    ]


def enumerate_states(cap: int, budget: int, window: int = 5) -> list[MdpState]:
    """All states, lexicographic in (w_low, w_high, history).

    The history holds the last window-1 processed totals.
    """
    if cap < 0 or budget < 0 or window < 1:
        raise ConfigError(f"bad state-space parameters cap={cap} budget={budget} window={window}")
    hists = _history_tuples(budget, window - 1)
    return [
        MdpState(w_low, w_high, h)
        for w_low in range(cap + 1)
        for w_high in range(cap + 1)
        for h in hists
    ]


def legal_actions(state: MdpState, budget: int) -> range:
    """Actions that keep the processed window within budget."""
    return range(0, budget - sum(state.history) + 1)


class StateSpace:
    """Indexed enumeration with O(1) encode/decode, also vectorized."""

    def __init__(self, cap: int, budget: int, window: int = 5) -> None:
        self.cap = cap
        self.budget = budget
        self.window = window
        self.states = enumerate_states(cap, budget, window)
        self.n = len(self.states)
        self._hists = _history_tuples(budget, window - 1)
        self.n_hist = len(self._hists)
        self._hist_index = {h: i for i, h in enumerate(self._hists)}
        # Radix lookup: history digits base (budget+1) -> enumeration index.
        hlen = window - 1
        self._radix = np.full((budget + 1) ** hlen, -1, dtype=np.int64)
        for h, i in self._hist_index.items():
            code = 0
            for d in h:
                code = code * (budget + 1) + d
            self._radix[code] = i

    def encode(self, state: MdpState) -> int:
        hi = self._hist_index.get(tuple(state.history))
        if hi is None:
            raise ConfigError(f"history {state.history} outside budget {self.budget}")
        if not (0 <= state.w_low <= self.cap and 0 <= state.w_high <= self.cap):
            raise ConfigError(f"counts {state.w_low},{state.w_high} outside cap {self.cap}")
        return (state.w_low * (self.cap + 1) + state.w_high) * self.n_hist + hi

    def decode(self, index: int) -> MdpState:
        return self.states[index]

    def encode_arrays(
        self, w_low: np.ndarray, w_high: np.ndarray, hist: np.ndarray
    ) -> np.ndarray:
        """Vectorized encode; counts are clamped to cap, histories exact."""
        wl = np.minimum(w_low, self.cap)
        wh = np.minimum(w_high, self.cap)
        if hist.shape[-1] != self.window - 1:
            raise ConfigError("history width does not match the window")
        code = np.zeros(wl.shape, dtype=np.int64)
        for j in range(self.window - 1):
            code = code * (self.budget + 1) + hist[..., j]
        hi = self._radix[code]
        return (wl * (self.cap + 1) + wh) * self.n_hist + hi


def reward(
    state: MdpState,
    action: int,
    arrival_model: ArrivalModel,
    budget: int | None = None,
) -> float:
    """Negated waiting cost after processing ``action`` requests, highs first."""
    if action < 0:
        raise IllegalAction(f"action {action} is negative")
    if budget is not None and sum(state.history) + action > budget:
        raise IllegalAction(
            f"action {action} breaks budget {budget} with history {state.history}"
        )
    high_left = max(state.w_high - action, 0)
    spill = max(action - state.w_high, 0)
    low_left = max(state.w_low - spill, 0)
    return -(arrival_model.cost_high * high_left + arrival_model.cost_low * low_left)


# =============================================================
# Transitions
# =============================================================


@dataclass(frozen=True)
class ActionTransitions:
    """Sparse transition rows and rewards for one action."""

    legal: np.ndarray  # bool (n,)
    src: np.ndarray  # int64 (nnz,) state indices, grouped by state
    dst: np.ndarray  # int64 (nnz,)
    prob: np.ndarray  # float64 (nnz,)
    reward: np.ndarray  # float64 (n,), zero at illegal states


@dataclass(frozen=True)
class TransitionTable:
    space: StateSpace
    by_action: tuple[ActionTransitions, ...]

    def transitions(self, index: int, action: int) -> list[tuple[int, float]]:
        """Successor list for one (state, action); empty if illegal."""
        at = self.by_action[action]
        if not at.legal[index]:
            return []
        mask = at.src == index
        return list(zip(at.dst[mask].tolist(), at.prob[mask].tolist()))

    def row_sums(self, action: int) -> np.ndarray:
        """Total outgoing probability per legal state for one action."""
        at = self.by_action[action]
        sums = np.bincount(at.src, weights=at.prob, minlength=self.space.n)
        return sums[at.legal]


def _binomial_pmf(k: int, p: float) -> list[float]:
    if k == 0:
        return [1.0]
    return [math.comb(k, j) * p**j * (1.0 - p) ** (k - j) for j in range(k + 1)]


def build_transitions(
    arrival_model: ArrivalModel, cap: int, budget: int, window: int = 5
) -> TransitionTable:
    """Sparse (state, action) -> successor distribution table.

    After processing, each arrival count k (with probability P[Y=k]) splits
    into j high-cost arrivals with Binomial(k, high_prob) weight; counts
    saturate at cap and merged successors accumulate probability.
    """
    space = StateSpace(cap, budget, window)
    splits = {k: _binomial_pmf(k, arrival_model.high_prob) for k, _ in arrival_model.count_dist}

    by_action = []
    for a in range(budget + 1):
        legal = np.zeros(space.n, dtype=bool)
        rewards = np.zeros(space.n, dtype=np.float64)
        src: list[int] = []
        dst: list[int] = []
        prob: list[float] = []
        for idx, s in enumerate(space.states):
            if sum(s.history) + a > budget:
                continue
            legal[idx] = True
            rewards[idx] = reward(s, a, arrival_model)
            high_left = max(s.w_high - a, 0)
            low_left = max(s.w_low - max(a - s.w_high, 0), 0)
            hist = (a,) + s.history[:-1] if window > 1 else ()
            merged: dict[int, float] = {}
            for k, pk in arrival_model.count_dist:
                if pk == 0.0:
                    continue
                pmf = splits[k]
                for j in range(k + 1):
                    pj = pk * pmf[j]
                    if pj == 0.0:
                        continue
                    nxt = MdpState(
                        min(low_left + (k - j), cap),
                        min(high_left + j, cap),
                        hist,
                    )
                    ni = space.encode(nxt)
                    merged[ni] = merged.get(ni, 0.0) + pj
            for ni, pj in merged.items():
                src.append(idx)
                dst.append(ni)
                prob.append(pj)
        by_action.append(
            ActionTransitions(
                legal=legal,
                src=np.asarray(src, dtype=np.int64),
                dst=np.asarray(dst, dtype=np.int64),
                prob=np.asarray(prob, dtype=np.float64),
                reward=rewards,
            )
        )
    return TransitionTable(space=space, by_action=tuple(by_action))


@dataclass(frozen=True)
class MdpModel:
    """A built decision model ready for the solver."""

    arrival_model: ArrivalModel
    discount: float
    table: TransitionTable

    def __post_init__(self) -> None:
        if not 0.0 < self.discount < 1.0:
            raise ConfigError(f"discount must lie in (0,1), got {self.discount}")

    @property
    def space(self) -> StateSpace:
        return self.table.space

    def transitions(self, index: int, action: int) -> list[tuple[int, float]]:
        return self.table.transitions(index, action)

    def reward_of(self, index: int, action: int) -> float:
        at = self.table.by_action[action]
        if not at.legal[index]:
            raise IllegalAction(f"action {action} illegal in state {index}")
        return float(at.reward[index])


def build_model(
    arrival_model: ArrivalModel,
    cap: int,
    budget: int,
    window: int = 5,
    discount: float = 0.9,
) -> MdpModel:
    table = build_transitions(arrival_model, cap, budget, window)
    return MdpModel(arrival_model=arrival_model, discount=discount, table=table)


# =============================================================
# Value iteration
# =============================================================


@dataclass(frozen=True)
class SolveInfo:
    iterations: int
    residual: float
    sweep_diffs: tuple[float, ...]


@dataclass(frozen=True)
class Policy:
    """Solved policy: per-state action and value, plus solve metadata."""

    space: StateSpace
    discount: float
    tolerance: float
    actions: np.ndarray  # int8 (n,)
    values: np.ndarray  # float64 (n,)
    info: SolveInfo | None = None

    def action_of(self, state: MdpState | int) -> int:
        idx = state if isinstance(state, int) else self.space.encode(state)
        return int(self.actions[idx])

    def value_of(self, state: MdpState | int) -> float:
        idx = state if isinstance(state, int) else self.space.encode(state)
        return float(self.values[idx])


def _sweep(
    table: TransitionTable, discount: float, values: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """One Bellman backup; returns (new values, greedy actions).

    Actions are scanned in ascending order with a strict improvement test,
    so exact ties resolve to the smallest action.
    """
    n = table.space.n
    best_v = np.full(n, -np.inf)
    best_a = np.zeros(n, dtype=np.int8)
    for a, at in enumerate(table.by_action):
        ev = np.bincount(at.src, weights=at.prob * values[at.dst], minlength=n)
        q = at.reward + discount * ev
        better = at.legal & (q > best_v)
        best_v[better] = q[better]
        best_a[better] = a
    return best_v, best_a


def value_iteration(
    model: MdpModel,
    tolerance: float = 1e-9,
    max_iterations: int | None = None,
) -> Policy:
    """Solve to a sup-norm Bellman residual within tolerance.

    Sweeps until successive value vectors differ by at most ``tolerance``;
    the fixed-point contraction then bounds the returned values' residual
    by discount * tolerance.
    """
    if tolerance <= 0:
        raise ConfigError(f"tolerance must be positive, got {tolerance}")
    gamma = model.discount
    if max_iterations is None:
        max_iterations = max(1, math.ceil(10 * math.log(tolerance) / math.log(gamma)))

    values = np.zeros(model.space.n, dtype=np.float64)
    diffs: list[float] = []
    for _ in range(max_iterations):
        new_values, _ = _sweep(model.table, gamma, values)
        diff = float(np.max(np.abs(new_values - values)))
        diffs.append(diff)
        values = new_values
        if diff <= tolerance:
            break
    else:
        raise NonConvergence(
            f"value iteration did not reach tolerance {tolerance} "
            f"in {max_iterations} sweeps (last diff {diffs[-1]:.3e})"
        )

    check_values, actions = _sweep(model.table, gamma, values)
    residual = float(np.max(np.abs(check_values - values)))
    return Policy(
        space=model.space,
        discount=gamma,
        tolerance=tolerance,
        actions=actions,
        values=values,
        info=SolveInfo(iterations=len(diffs), residual=residual, sweep_diffs=tuple(diffs)),
    )


def action_values(model: MdpModel, values: np.ndarray) -> np.ndarray:
    """Q(s, a) matrix for a value vector; -inf marks illegal actions."""
    n = model.space.n
    q = np.full((n, model.space.budget + 1), -np.inf)
    for a, at in enumerate(model.table.by_action):
        ev = np.bincount(at.src, weights=at.prob * values[at.dst], minlength=n)
        qa = at.reward + model.discount * ev
        q[at.legal, a] = qa[at.legal]
    return q


# =============================================================
# Policy file format
# =============================================================


def policy_text(policy: Policy) -> str:
    """Flat-file form of a policy: metadata header, then one row per state."""
    space = policy.space
    hcols = [f"h{j + 1}" for j in range(space.window - 1)]
    lines = ["cap,budget,gamma,tolerance"]
    lines.append(f"{space.cap},{space.budget},{policy.discount!r},{policy.tolerance!r}")
    lines.append(",".join(["index", "w_low", "w_high", *hcols, "action", "value"]))
    for idx, s in enumerate(space.states):
        cells = [str(idx), str(s.w_low), str(s.w_high)]
        cells.extend(str(h) for h in s.history)
        cells.append(str(int(policy.actions[idx])))
        cells.append(f"{policy.values[idx]:.12e}")
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def save_policy(policy: Policy, path) -> None:
    """Write the flat policy file (format under policy_text)."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(policy_text(policy))


def load_policy(path) -> Policy:
    """Read a policy file back; validates layout against the enumeration."""
    try:
        with open(path, "r", encoding="ascii") as fh:
            lines = [ln.rstrip("\n") for ln in fh]
    except OSError as exc:
        raise ConfigError(f"cannot read policy file {path}: {exc}") from exc
    try:
        if lines[0] != "cap,budget,gamma,tolerance":
            raise ConfigError(f"bad metadata header: {lines[0]!r}")
        cap_s, budget_s, gamma_s, tol_s = lines[1].split(",")
        cap, budget = int(cap_s), int(budget_s)
        gamma, tolerance = float(gamma_s), float(tol_s)
        state_header = lines[2].split(",")
        hcols = [c for c in state_header if c.startswith("h")]
        expected = ["index", "w_low", "w_high", *hcols, "action", "value"]
        if state_header != expected:
            raise ConfigError(f"bad state header: {lines[2]!r}")
        window = len(hcols) + 1
    except (IndexError, ValueError) as exc:
        raise ConfigError(f"malformed policy file {path}: {exc}") from exc

    space = StateSpace(cap, budget, window)
    rows = lines[3:]
    rows = [r for r in rows if r]
    if len(rows) != space.n:
        raise ModelMismatch(f"policy file has {len(rows)} states, expected {space.n}")
    actions = np.zeros(space.n, dtype=np.int8)
    values = np.zeros(space.n, dtype=np.float64)
    seen = np.zeros(space.n, dtype=bool)
    for row in rows:
        parts = row.split(",")
        if len(parts) != len(state_header):
            raise ConfigError(f"malformed policy row: {row!r}")
        idx = int(parts[0])
        s = MdpState(int(parts[1]), int(parts[2]), tuple(int(x) for x in parts[3:-2]))
        if not 0 <= idx < space.n or space.states[idx] != s:
            raise ModelMismatch(f"row {idx} does not match the state enumeration: {row!r}")
        if seen[idx]:
            raise ModelMismatch(f"duplicate policy row for state {idx}")
        seen[idx] = True
        a = int(parts[-2])
        if a not in legal_actions(s, budget):
            raise ModelMismatch(f"illegal action {a} for state {s}")
        actions[idx] = a
        values[idx] = float(parts[-1])
    return Policy(space=space, discount=gamma, tolerance=tolerance, actions=actions, values=values)


# =============================================================
# Live-queue bridge
# =============================================================


def _expected_constraints(space: StateSpace) -> tuple[int, int]:
    return space.budget, space.window


def _validate_queue(policy: Policy, state: QueueState, arrival_model: ArrivalModel) -> None:
    cs = state.constraints
    budget, window = _expected_constraints(policy.space)
    ok = (
        cs.mode is ConstraintMode.ABSOLUTE_COUNT
        and len(cs) == 1
        and int(cs[0].delta) == budget
        and cs[0].window == window
    )
    if not ok:
        raise ModelMismatch(
            f"policy solved for single absolute constraint ({budget},{window}); "
            f"queue has {[(str(c.delta), c.window) for c in cs]} in {cs.mode.value} mode"
        )
    for r in state.waiting:
        arrival_model.cost_class(r.cost)
        if r.stake != 1:
            raise ModelMismatch(f"model counts unit stakes; {r.validator} has stake {r.stake}")


def queue_to_mdp_state(
    state: QueueState, arrival_model: ArrivalModel, cap: int, budget: int, window: int
) -> MdpState:
    """Clamped count view of a live queue for policy lookup."""
    w_low = sum(1 for r in state.waiting if r.cost == arrival_model.cost_low)
    w_high = sum(1 for r in state.waiting if r.cost == arrival_model.cost_high)
    recent = state.processed_totals[-(window - 1):] if window > 1 else ()
    hist = tuple(reversed(recent)) + (0,) * (window - 1 - len(recent))
    return MdpState(min(w_low, cap), min(w_high, cap), hist)


def _priority_order(waiting: Sequence[ExitRequest]) -> list[ExitRequest]:
    # Highest cost first, FCFS within equal cost (waiting is arrival-ordered).
    return sorted(waiting, key=lambda r: -r.cost)


def optimal_select(
    policy: Policy,
    state: QueueState,
    arrival_model: ArrivalModel,
    cap: int | None = None,
) -> tuple[ExitRequest, ...]:
    """Select per the solved policy: look up the action, take that many.

    Raises ModelMismatch unless the queue runs exactly the (budget, window)
    absolute constraint the policy was solved for with two unit-stake cost
    classes matching the arrival model.
    """
    space = policy.space
    if cap is not None and cap != space.cap:
        raise ModelMismatch(f"policy solved for cap {space.cap}, got {cap}")
    _validate_queue(policy, state, arrival_model)
    mstate = queue_to_mdp_state(state, arrival_model, space.cap, space.budget, space.window)
    action = policy.action_of(mstate)
    take = min(action, len(state.waiting))
    return tuple(_priority_order(state.waiting)[:take])


@dataclass(frozen=True)
class OptimalMechanism:
    """Policy-backed drop-in for the heuristic mechanisms."""

    policy: Policy
    arrival_model: ArrivalModel

    @property
    def name(self) -> str:
        return "optimal"

    def select(
        self, state: QueueState, constraints: ConstraintSet | None = None
    ) -> tuple[ExitRequest, ...]:
        if constraints is not None and constraints != state.constraints:
            raise ModelMismatch("optimal mechanism audits the state's own constraints")
        return optimal_select(self.policy, state, self.arrival_model)

    def model_constraints(self) -> ConstraintSet:
        """The single absolute constraint this policy was solved for."""
        return ConstraintSet(
            [Constraint(self.policy.space.budget, self.policy.space.window)],
            ConstraintMode.ABSOLUTE_COUNT,
        )


# =============================================================
# Marginal-externality payments
# =============================================================


@dataclass(frozen=True)
class VcgEstimate:
    """Estimated externality payment with its sampling error."""

    payment: float  # clamped at 0
    raw_mean: float
    stderr: float
    samples: int
    exact: bool


class _BranchState:
    """Mutable count-level simulation state for one payment branch."""

    __slots__ = ("w_low", "w_high", "hist", "agent_active", "agent_ahead", "saturated")

    def __init__(self, w_low, w_high, hist, agent_active, agent_ahead):
        self.w_low = w_low
        self.w_high = w_high
        self.hist = hist
        self.agent_active = agent_active
        self.agent_ahead = agent_ahead
        self.saturated = False


def _advance_branch(
    policy: Policy,
    model: ArrivalModel,
    br: _BranchState,
    counts: np.ndarray,
    highs: np.ndarray,
    agent_is_high: bool,
    agent_cost: float,
) -> np.ndarray:
    """One period for all samples of one branch; returns others' cost."""
    space = policy.space
    if np.any(br.w_low > space.cap) or np.any(br.w_high > space.cap):
        br.saturated = True
    idx = space.encode_arrays(br.w_low, br.w_high, br.hist)
    action = policy.actions[idx].astype(np.int64)
    action = np.minimum(action, br.w_low + br.w_high)

    if br.agent_active is not None:
        processed_now = br.agent_active & (action > br.agent_ahead)
        br.agent_ahead = np.where(
            br.agent_active & ~processed_now,
            np.maximum(br.agent_ahead - action, 0),
            br.agent_ahead,
        )

    done_high = np.minimum(action, br.w_high)
    done_low = np.minimum(action - done_high, br.w_low)
    br.w_high = br.w_high - done_high
    br.w_low = br.w_low - done_low

    total_cost = model.cost_low * br.w_low + model.cost_high * br.w_high
    if br.agent_active is not None:
        waiting_after = br.agent_active & ~processed_now
        others = total_cost - np.where(waiting_after, agent_cost, 0.0)
        br.agent_active = waiting_after
    else:
        others = total_cost.astype(np.float64)

    if space.window > 1:
        br.hist = np.concatenate(
            [ (done_high + done_low)[:, None], br.hist[:, :-1] ], axis=1
        )
    # New arrivals; future high arrivals outrank a still-waiting low agent.
    if br.agent_active is not None and not agent_is_high:
        br.agent_ahead = br.agent_ahead + np.where(br.agent_active, highs, 0)
    br.w_high = br.w_high + highs
    br.w_low = br.w_low + (counts - highs)
    return others


def _replay_to_agent(
    policy: Policy,
    arrival_model: ArrivalModel,
    trajectory: Sequence[Sequence[ExitRequest]],
    agent: ExitRequest,
) -> tuple[QueueState, int]:
    """Replay the realized arrivals under the policy up to the agent's period."""
    agent_period = None
    for t, batch in enumerate(trajectory, start=1):
        for r in batch:
            if r.validator == agent.validator:
                if r != agent:
                    raise ModelMismatch(f"trajectory holds a different request for {agent.validator}")
                if agent_period is not None:
                    raise ModelMismatch(f"agent {agent.validator} appears twice")
                agent_period = t
    if agent_period is None:
        raise UnknownRequest(f"agent {agent.validator} not present in the trajectory")
    if any(r.requested_at != t for t, batch in enumerate(trajectory, start=1) for r in batch):
        raise ModelMismatch("trajectory batches must carry matching requested_at periods")

    cs = ConstraintSet(
        [Constraint(policy.space.budget, policy.space.window)], ConstraintMode.ABSOLUTE_COUNT
    )
    state = QueueState.initial(cs, arrivals=trajectory[0])
    for t in range(1, agent_period):
        selected = optimal_select(policy, state, arrival_model)
        state = step(state, trajectory[t], selected)
    return state, agent_period


def vcg_estimate(
    policy: Policy,
    trajectory: Sequence[Sequence[ExitRequest]],
    agent: ExitRequest,
    arrival_model: ArrivalModel,
    *,
    samples: int = 10_000,
    seed: int = 0,
    horizon: int | None = None,
) -> VcgEstimate:
    """Externality of one agent: others' expected discounted waiting cost
    with the agent present minus with it absent, under the solved policy.

    Both counterfactuals restart from the agent's arrival period (discount
    epoch 0) and share common-random-number futures. Deterministic arrival
    models are evaluated exactly; the value function cross-checks the
    without-agent branch whenever that state is inside the model's cap.
    Trajectory batches after the agent's arrival are ignored: the payment
    conditions on the state at arrival and averages over model futures.
    """
    state, agent_period = _replay_to_agent(policy, arrival_model, trajectory, agent)
    _validate_queue(policy, state, arrival_model)
    space = policy.space
    gamma = policy.discount
    if horizon is None:
        horizon = max(1, math.ceil(math.log(1e-10) / math.log(gamma)))

    agent_is_high = arrival_model.cost_class(agent.cost) == "high"
    order = _priority_order(state.waiting)
    ahead0 = next(i for i, r in enumerate(order) if r.validator == agent.validator)
    w_low0 = sum(1 for r in state.waiting if r.cost == arrival_model.cost_low)
    w_high0 = sum(1 for r in state.waiting if r.cost == arrival_model.cost_high)
    recent = state.processed_totals[-(space.window - 1):] if space.window > 1 else ()
    hist0 = tuple(reversed(recent)) + (0,) * (space.window - 1 - len(recent))

    exact = arrival_model.is_deterministic()
    m = 1 if exact else int(samples)
    if m < 1:
        raise ConfigError(f"samples must be >= 1, got {samples}")

    def fresh(with_agent: bool) -> _BranchState:
        wl, wh = w_low0, w_high0
        if not with_agent:
            if agent_is_high:
                wh -= 1
            else:
                wl -= 1
        return _BranchState(
            w_low=np.full(m, wl, dtype=np.int64),
            w_high=np.full(m, wh, dtype=np.int64),
            hist=np.tile(np.asarray(hist0, dtype=np.int64), (m, 1)),
            agent_active=np.ones(m, dtype=bool) if with_agent else None,
            agent_ahead=np.full(m, ahead0, dtype=np.int64) if with_agent else None,
        )

    branch_with = fresh(True)
    branch_without = fresh(False)

    ks = np.asarray([k for k, _ in arrival_model.count_dist], dtype=np.int64)
    ps = np.asarray([p for _, p in arrival_model.count_dist], dtype=np.float64)
    rng = np.random.default_rng(seed)

    acc_with = np.zeros(m, dtype=np.float64)
    acc_without = np.zeros(m, dtype=np.float64)
    disc = 1.0
    for _ in range(horizon):
        if exact:
            k_fixed = next(k for k, p in arrival_model.count_dist if p > 0.0)
            counts = np.full(m, k_fixed, dtype=np.int64)
            highs = counts * int(arrival_model.high_prob) if k_fixed else np.zeros(m, np.int64)
        else:
            counts = rng.choice(ks, size=m, p=ps)
            highs = rng.binomial(counts, arrival_model.high_prob)
        acc_with += disc * _advance_branch(
            policy, arrival_model, branch_with, counts, highs, agent_is_high, agent.cost
        )
        acc_without += disc * _advance_branch(
            policy, arrival_model, branch_without, counts, highs, agent_is_high, agent.cost
        )
        disc *= gamma

    diffs = acc_with - acc_without
    mean = float(np.mean(diffs))
    if exact:
        stderr = 0.0
        # Cross-check: with no agent-tracking the without branch is plain
        # value-function mass, valid whenever counts never saturate the cap.
        wl = w_low0 - (0 if agent_is_high else 1)
        wh = w_high0 - (1 if agent_is_high else 0)
        if wl <= space.cap and wh <= space.cap and not branch_without.saturated:
            v = policy.value_of(MdpState(wl, wh, hist0))
            if abs(-v - float(acc_without[0])) > 1e-6 * max(1.0, abs(v)):
                raise ModelMismatch(
                    "deterministic rollout disagrees with the value function; "
                    "policy and arrival model are inconsistent"
                )
    else:
        stderr = float(np.std(diffs, ddof=1) / math.sqrt(m)) if m > 1 else 0.0
    return VcgEstimate(
        payment=max(0.0, mean),
        raw_mean=mean,
        stderr=stderr,
        samples=m,
        exact=exact,
    )


def vcg_payment(
    policy: Policy,
    trajectory: Sequence[Sequence[ExitRequest]],
    agent: ExitRequest,
    arrival_model: ArrivalModel,
    *,
    samples: int = 10_000,
    seed: int = 0,
    horizon: int | None = None,
) -> float:
    """Nonnegative externality payment for one agent (see vcg_estimate)."""
    return vcg_estimate(
        policy, trajectory, agent, arrival_model, samples=samples, seed=seed, horizon=horizon
    ).payment
