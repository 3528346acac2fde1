"""Seeded trial execution, performance metrics, and Monte Carlo aggregation.

A trial simulates ``steps`` periods from an empty queue: arrivals join the
waiting list, the mechanism selects, ``step`` applies the selection, and the
period's penalty (negated total waiting cost of whatever remains) is
recorded. Two metrics summarize a trial:

  * discounted_reward: (1 - gamma) * sum of gamma^t * queue cost at t, where
    the queue cost charges every request still pending when period t opens,
    including the ones processed that same period. Weight gamma^0 belongs to
    an implicit empty period before the first arrivals; the (1 - gamma)
    factor normalizes the sum to a per-period scale.
  * steady_state_disutility: mean of -cost * delay over requests processed
    after the burn-in. Requests still waiting at trial end are charged the
    delay they would have if processed in the final period; censoring them
    instead would flatter exactly the heavy-tailed configurations where the
    backlog matters (reports note this rule).

monte_carlo runs trials at seeds seed, seed+1, ... and aggregates one metric.
Trials are independent; parallel and serial execution produce identical
summaries. Count-only configurations (two cost levels, unit stakes, one
absolute constraint, a priority mechanism, discounted metric) are routed
through a vectorized engine that replays bit-identical arrival streams; its
equivalence with the object engine is pinned by tests.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import (
    ConstraintMode,
    ConstraintSet,
    ExitRequest,
    QueueState,
    check_trace_feasible,
    step,
)
from .distributions import Discrete, ValueDistribution
from .errors import (
    ConfigError,
    FeasibilityViolation,
    InstanceTooLarge,
    NoWithdrawals,
)
from .mechanisms import Mechanism, MechanismKind, alpha_capacity
from .mdp import OptimalMechanism

__all__ = [
    "SimulationConfig",
    "TrialResult",
    "sample_arrivals",
    "sample_arrival_schedule",
    "run_trial",
    "discounted_reward",
    "steady_state_disutility",
    "MonteCarloSummary",
    "monte_carlo",
    "HistogramBin",
    "make_histogram",
    "brute_force_schedules",
]

METRICS = ("discounted", "steady-state")


@dataclass(frozen=True)
class SimulationConfig:
    """Everything one experiment needs to be rerun exactly."""

    constraints: ConstraintSet
    mechanism: Mechanism | OptimalMechanism
    arrival_counts: Discrete
    values: ValueDistribution
    steps: int
    trials: int = 1
    seed: int = 0
    metric: str = "discounted"
    discount: float | None = None
    burn_in: int = 0
    initial_stake: int | None = None

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ConfigError(f"steps must be positive, got {self.steps}")
        if self.trials < 1:
            raise ConfigError(f"trials must be positive, got {self.trials}")
        if not 0 <= self.burn_in < self.steps:
            raise ConfigError(f"burn_in must lie in [0, steps), got {self.burn_in}")
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if self.metric == "discounted":
            if self.discount is None:
                raise ConfigError("discounted metric needs a discount factor")
        if self.discount is not None and not 0.0 < self.discount < 1.0:
            raise ConfigError(f"discount must lie in (0,1), got {self.discount}")
        if not isinstance(self.arrival_counts, Discrete):
            raise ConfigError("arrival counts must be a finite discrete distribution")
        self.arrival_counts.as_count_dist()  # validates nonnegative integer support
        if self.constraints.mode is ConstraintMode.FRACTION_OF_STAKE and self.initial_stake is None:
            raise ConfigError("fractional constraints need initial_stake")


@dataclass(frozen=True)
class TrialResult:
    """One simulated trajectory, complete enough to audit and re-score."""

    per_period_penalty: tuple[float, ...]
    processed_log: tuple[tuple[tuple[ExitRequest, int, float], ...], ...]
    trace: tuple[int, ...]
    final_state: QueueState

    def __post_init__(self) -> None:
        if any(p > 0 for p in self.per_period_penalty):
            raise ConfigError("penalties must be nonpositive")
        if any(d < 0 for batch in self.processed_log for _, d, _ in batch):
            raise ConfigError("processing delays must be nonnegative")

    @property
    def steps(self) -> int:
        return len(self.per_period_penalty)


def sample_arrivals(
    rng: np.random.Generator,
    period: int,
    arrival_counts: Discrete,
    values: ValueDistribution,
) -> list[ExitRequest]:
    """Draw one period's batch: a count, then that many i.i.d. costs."""
    k = int(arrival_counts.sample(rng, 1)[0])
    costs = values.sample(rng, k)
    return [
        ExitRequest(validator=f"p{period}.{i}", requested_at=period, cost=float(c))
        for i, c in enumerate(costs)
    ]


def sample_arrival_schedule(
    rng: np.random.Generator,
    steps: int,
    arrival_counts: Discrete,
    values: ValueDistribution,
) -> list[list[ExitRequest]]:
    """Whole-trial arrival schedule from two bulk draws.

    Counts for every period are drawn in one call and costs in a second, so
    an engine that consumes raw arrays can replay the identical stream.
    """
    counts = np.asarray(arrival_counts.sample(rng, steps), dtype=np.int64)
    costs = np.asarray(values.sample(rng, int(counts.sum())), dtype=np.float64)
    schedule: list[list[ExitRequest]] = []
    pos = 0
    for t in range(1, steps + 1):
        k = int(counts[t - 1])
        batch = [
            ExitRequest(validator=f"p{t}.{i}", requested_at=t, cost=float(costs[pos + i]))
            for i in range(k)
        ]
        pos += k
        schedule.append(batch)
    return schedule


def run_trial(config: SimulationConfig, seed: int) -> TrialResult:
    """Simulate one seeded trajectory under the configured mechanism."""
    rng = np.random.default_rng(seed)
    schedule = sample_arrival_schedule(rng, config.steps, config.arrival_counts, config.values)
    state = QueueState.initial(
        config.constraints, total_stake=config.initial_stake, arrivals=schedule[0]
    )
    penalties: list[float] = []
    log: list[tuple[tuple[ExitRequest, int, float], ...]] = []
    for t in range(1, config.steps + 1):
        selected = config.mechanism.select(state)
        chosen = {r.validator for r in selected}
        penalties.append(-math.fsum(r.cost for r in state.waiting if r.validator not in chosen))
        log.append(tuple((r, t - r.requested_at, r.cost) for r in selected))
        arrivals = schedule[t] if t < config.steps else ()
        state = step(state, arrivals, selected)
    return TrialResult(
        per_period_penalty=tuple(penalties),
        processed_log=tuple(log),
        trace=state.processed_totals,
        final_state=state,
    )


# =============================================================
# Metrics
# =============================================================


def _discounted(costs: Sequence[float], gamma: float) -> float:
    terms = []
    weight = gamma
    for p in costs:
        terms.append(weight * p)
        weight *= gamma
    return (1.0 - gamma) * math.fsum(terms)


def discounted_reward(result: TrialResult, gamma: float) -> float:
    """Normalized discounted queue cost of a trial.

    Each period t contributes gamma^t times the negated total cost of every
    request pending when the period opens, so a request is charged from its
    arrival period through its processing period inclusive. That per-period
    charge equals the recorded penalty minus the costs processed that period.
    Weight gamma^0 is reserved for an implicit empty period before the first
    arrivals, and the discounted sum is scaled by (1 - gamma), which maps a
    constant per-period charge of -1 to a reward of about -1.
    """
    if not 0.0 < gamma < 1.0:
        raise ConfigError(f"gamma must lie in (0,1), got {gamma}")
    stream = [
        pen - math.fsum(c for _, _, c in batch)
        for pen, batch in zip(result.per_period_penalty, result.processed_log)
    ]
    return _discounted(stream, gamma)


def steady_state_disutility(result: TrialResult, burn_in: int) -> float:
    """Mean of -cost * delay over withdrawals processed after the burn-in.

    Requests never processed count as if processed in the final period; they
    are included in the mean's denominator.
    """
    if not 0 <= burn_in < result.steps:
        raise ConfigError(f"burn_in must lie in [0, steps), got {burn_in}")
    terms = [
        -c * d
        for t, batch in enumerate(result.processed_log, start=1)
        if t > burn_in
        for _, d, c in batch
    ]
    end = result.steps
    terms.extend(-r.cost * (end - r.requested_at) for r in result.final_state.waiting)
    if not terms:
        raise NoWithdrawals(f"no withdrawals processed after period {burn_in}")
    return math.fsum(terms) / len(terms)


def _score(result: TrialResult, config: SimulationConfig) -> float:
    if config.metric == "discounted":
        return discounted_reward(result, config.discount)
    return steady_state_disutility(result, config.burn_in)


# =============================================================
# Monte Carlo
# =============================================================


@dataclass(frozen=True)
class MonteCarloSummary:
    """Aggregated metric over independent trials, plus the raw values."""

    mechanism: str
    metric: str
    mean: float
    stderr: float
    p001: float
    p01: float
    p50: float
    trials: int
    steps: int
    gamma: float | None
    seed: int
    values: tuple[float, ...] = field(repr=False)

    def histogram(self, bin_width: float = 0.1) -> list["HistogramBin"]:
        return make_histogram(self.values, bin_width)


def _audit_trace(
    trace: Sequence[int],
    stake_history: Sequence[int] | None,
    constraints: ConstraintSet,
    mechanism_name: str,
) -> None:
    if not check_trace_feasible(tuple(trace), stake_history, constraints):
        raise FeasibilityViolation(
            f"{mechanism_name} produced an infeasible trace {tuple(trace)}"
        )


def _summarize(values: Sequence[float], config: SimulationConfig) -> MonteCarloSummary:
    arr = np.asarray(values, dtype=np.float64)
    n = arr.size
    mean = math.fsum(values) / n
    stderr = float(np.std(arr, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    p001, p01, p50 = (float(q) for q in np.quantile(arr, [0.001, 0.01, 0.5]))
    return MonteCarloSummary(
        mechanism=config.mechanism.name,
        metric=config.metric,
        mean=mean,
        stderr=stderr,
        p001=p001,
        p01=p01,
        p50=p50,
        trials=config.trials,
        steps=config.steps,
        gamma=config.discount,
        seed=config.seed,
        values=tuple(float(v) for v in values),
    )


def monte_carlo(config: SimulationConfig, threads: int = 1) -> MonteCarloSummary:
    """Run `trials` trials at seeds seed, seed+1, ... and aggregate the metric.

    Every trial's trace is audited against the constraint set before
    aggregation. Thread count changes execution only, never results.
    """
    if _fastlane_eligible(config):
        streams, traces = _fastlane_arrays(config)
        _fastlane_audit(traces, config)
        values = [_discounted(streams[i], config.discount) for i in range(config.trials)]
        return _summarize(values, config)

    seeds = [config.seed + i for i in range(config.trials)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda s: run_trial(config, s), seeds))
    else:
        results = [run_trial(config, s) for s in seeds]
    values = []
    for r in results:
        _audit_trace(
            r.trace, r.final_state.stake_history, config.constraints, config.mechanism.name
        )
        values.append(_score(r, config))
    return _summarize(values, config)


@dataclass(frozen=True)
class HistogramBin:
    left: float
    right: float
    count: int
    density: float
    log_density: float


def make_histogram(values: Sequence[float], bin_width: float = 0.1) -> list[HistogramBin]:
    """Fixed-width bins aligned at integer multiples of the width.

    Density integrates to 1 over the emitted bins; empty bins are omitted,
    so log_density (natural log) is always finite.
    """
    if bin_width <= 0:
        raise ConfigError(f"bin width must be positive, got {bin_width}")
    if not values:
        raise ConfigError("cannot bin an empty value list")
    n = len(values)
    indices = np.floor(np.asarray(values, dtype=np.float64) / bin_width).astype(np.int64)
    bins = []
    for idx, count in sorted(zip(*np.unique(indices, return_counts=True))):
        density = count / (n * bin_width)
        bins.append(
            HistogramBin(
                left=idx * bin_width,
                right=(idx + 1) * bin_width,
                count=int(count),
                density=density,
                log_density=math.log(density),
            )
        )
    return bins


# =============================================================
# Vectorized count engine
# =============================================================
#
# Restricted to configurations whose queue dynamics are a function of the
# (low, high) waiting counts: two cost levels, unit stakes, one absolute
# constraint, highest-cost-first mechanisms, discounted metric. MINSLACK and
# the FCFS-ordered baseline interleave classes by arrival order, which counts
# alone cannot express, so they stay on the object engine.

_FASTLANE_KINDS = (
    MechanismKind.PRIO_MINSLACK,
    MechanismKind.ALPHA_MINSLACK,
    MechanismKind.CONSTANT,
)


def _fastlane_eligible(config: SimulationConfig) -> bool:
    if config.metric != "discounted":
        return False
    cs = config.constraints
    if cs.mode is not ConstraintMode.ABSOLUTE_COUNT or len(cs) != 1:
        return False
    if not isinstance(config.values, Discrete) or len(config.values.points) != 2:
        return False
    m = config.mechanism
    if isinstance(m, OptimalMechanism):
        if m.model_constraints() != cs:
            return False
        lo, hi = sorted(config.values.points)
        return (lo, hi) == (m.arrival_model.cost_low, m.arrival_model.cost_high)
    return isinstance(m, Mechanism) and m.kind in _FASTLANE_KINDS and m.sort_key == "cost"


def _fastlane_arrays(config: SimulationConfig) -> tuple[np.ndarray, np.ndarray]:
    """Queue-cost and processed-count matrices (trials x steps), lockstep
    with run_trial's arrival streams. Queue costs charge the pending queue
    before removal, mirroring discounted_reward's penalty-minus-fees stream
    operation for operation so both engines round identically."""
    m, n = config.trials, config.steps
    cost_lo, cost_hi = sorted(float(p) for p in config.values.points)
    budget = int(config.constraints[0].delta)
    window = config.constraints[0].window

    counts = np.empty((m, n), dtype=np.int64)
    highs = np.empty((m, n), dtype=np.int64)
    for i in range(m):
        rng = np.random.default_rng(config.seed + i)
        c = np.asarray(config.arrival_counts.sample(rng, n), dtype=np.int64)
        costs = np.asarray(config.values.sample(rng, int(c.sum())), dtype=np.float64)
        offsets = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(c, out=offsets[1:])
        cum_high = np.zeros(costs.size + 1, dtype=np.int64)
        np.cumsum(costs == cost_hi, out=cum_high[1:])
        counts[i] = c
        highs[i] = cum_high[offsets[1:]] - cum_high[offsets[:-1]]

    mech = config.mechanism
    if isinstance(mech, OptimalMechanism):
        space = mech.policy.space
        actions = mech.policy.actions.astype(np.int64)
        lookup = None
    else:
        space = None
        if mech.kind is MechanismKind.PRIO_MINSLACK:
            lookup = np.arange(budget + 1, dtype=np.int64)
        elif mech.kind is MechanismKind.ALPHA_MINSLACK:
            lookup = np.asarray(
                [alpha_capacity(mech.alpha, s) for s in range(budget + 1)], dtype=np.int64
            )
        else:
            lookup = np.minimum(np.arange(budget + 1, dtype=np.int64), mech.rate)

    w_low = np.zeros(m, dtype=np.int64)
    w_high = np.zeros(m, dtype=np.int64)
    hist = np.zeros((m, window - 1), dtype=np.int64)
    streams = np.empty((m, n), dtype=np.float64)
    processed = np.empty((m, n), dtype=np.int64)

    w_low += counts[:, 0] - highs[:, 0]
    w_high += highs[:, 0]
    for t in range(n):
        if space is not None:
            idx = space.encode_arrays(w_low, w_high, hist)
            take = np.minimum(actions[idx], w_low + w_high)
        else:
            slack = budget - hist.sum(axis=1)
            take = np.minimum(lookup[slack], w_low + w_high)
        done_high = np.minimum(take, w_high)
        done_low = take - done_high
        w_high -= done_high
        w_low -= done_low
        penalty = -(cost_lo * w_low + cost_hi * w_high)
        fee = cost_lo * done_low + cost_hi * done_high
        streams[:, t] = penalty - fee
        processed[:, t] = take
        if window > 1:
            hist[:, 1:] = hist[:, :-1]
            hist[:, 0] = take
        if t + 1 < n:
            w_high += highs[:, t + 1]
            w_low += counts[:, t + 1] - highs[:, t + 1]
    return streams, processed


def _fastlane_audit(processed: np.ndarray, config: SimulationConfig) -> None:
    budget = int(config.constraints[0].delta)
    window = config.constraints[0].window
    n = processed.shape[1]
    cum = np.zeros((processed.shape[0], n + 1), dtype=np.int64)
    np.cumsum(processed, axis=1, out=cum[:, 1:])
    for t0 in range(n):
        hi = min(t0 + window, n)
        if np.any(cum[:, hi] - cum[:, t0] > budget):
            raise FeasibilityViolation(
                f"{config.mechanism.name} violated the ({budget},{window}) window"
            )


# =============================================================
# Brute-force schedule oracle
# =============================================================


def brute_force_schedules(
    requests: Sequence[ExitRequest],
    constraints: ConstraintSet,
    horizon: int,
) -> list[tuple[int, ...]]:
    """Every feasible per-period processing-count vector for the instance.

    Enumerates by depth-first search over per-period counts, checking the
    sliding windows directly (independent of the slack computation it is
    used to test). Unit stakes and absolute constraints only; the node
    budget guards against accidental blow-ups.
    """
    if constraints.mode is not ConstraintMode.ABSOLUTE_COUNT:
        raise ConfigError("schedule enumeration supports absolute constraints only")
    if horizon < 1:
        raise ConfigError(f"horizon must be positive, got {horizon}")
    if any(r.stake != 1 for r in requests):
        raise ConfigError("schedule enumeration assumes unit stakes")
    arrived = [0] * (horizon + 1)
    for r in requests:
        if r.requested_at <= horizon:
            arrived[r.requested_at] += 1
    caps = [(int(c.delta), c.window) for c in constraints]

    budget_limit = 10_000_000
    nodes = 0
    out: list[tuple[int, ...]] = []
    counts: list[int] = []

    def recurse(t: int, available: int) -> None:
        nonlocal nodes
        if t > horizon:
            out.append(tuple(counts))
            return
        available += arrived[t]
        most = available
        for cap, window in caps:
            used = sum(counts[max(0, t - window) : t - 1])
            most = min(most, cap - used)
        for c in range(most + 1):
            nodes += 1
            if nodes > budget_limit:
                raise InstanceTooLarge(
                    f"schedule enumeration exceeded {budget_limit} nodes"
                )
            counts.append(c)
            recurse(t + 1, available - c)
            counts.pop()

    recurse(1, 0)
    return out
