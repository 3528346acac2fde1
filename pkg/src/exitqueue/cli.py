"""Batch front-end: experiment configs in, CSV reports out.

Subcommands:
  solve        build the decision model from a config and write a policy file
  simulate     run the configured mechanisms and emit one CSV row per mechanism
  histogram    emit binned per-mechanism metric densities
  policy-diff  compare a policy file against the greedy slack-filling action
  verify       run fast built-in cross-checks of the core invariants

Config files are INI-style (configparser), one experiment per file; the
schema is documented in the README. Relative paths inside a config resolve
against the config file's directory, so bundled experiments run from any
working directory. Policy files referenced by `optimal` are solved and
cached on first use.

Exit codes: 0 success, 2 config problems, 3 solver non-convergence,
4 model mismatch, 5 internal invariant violation.
"""

from __future__ import annotations

import argparse
import configparser
import sys
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .core import (
    Constraint,
    ConstraintMode,
    ConstraintSet,
    ExitRequest,
    QueueState,
    check_trace_feasible,
    step,
)
from .distributions import (
    Discrete,
    ExpConvention,
    Exponential,
    Pareto,
    ParetoConvention,
    Uniform,
    ValueDistribution,
)
from .errors import (
    ConfigError,
    ExitQueueError,
    FeasibilityViolation,
    InvalidAlpha,
    ModelMismatch,
    NonConvergence,
    UnknownRequest,
)
from .mechanisms import Mechanism, alpha_capacity, select_minslack
from .mdp import (
    ArrivalModel,
    OptimalMechanism,
    Policy,
    build_model,
    enumerate_states,
    legal_actions,
    load_policy,
    policy_text,
    value_iteration,
)
from .simulate import SimulationConfig, brute_force_schedules, monte_carlo

__all__ = ["main", "ExperimentSpec", "load_experiment"]

SIMULATE_HEADER = "mechanism,metric,mean,stderr,p001,p01,p50,trials,steps,gamma,seed"
HISTOGRAM_HEADER = "mechanism,bin_left,bin_right,count,density,log_density"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_MISMATCH = 4
EXIT_INVARIANT = 5


@dataclass(frozen=True)
class PolicySpec:
    """The [policy] section: model shape plus the cache location."""

    cap: int
    budget: int
    window: int
    tolerance: float
    high_prob: float
    path: Path


@dataclass(frozen=True)
class ExperimentSpec:
    """One parsed config file, ready to instantiate simulations."""

    name: str
    metric: str
    constraints: ConstraintSet
    arrival_counts: Discrete
    values: ValueDistribution
    steps: int
    trials: int
    seed: int
    discount: float | None
    burn_in: int
    initial_stake: int | None
    mechanism_names: tuple[str, ...]
    alpha: float
    rate: int
    sort_key: str
    constant_sort: str
    bin_width: float
    policy: PolicySpec | None

    def sim_config(self, mechanism) -> SimulationConfig:
        return SimulationConfig(
            constraints=self.constraints,
            mechanism=mechanism,
            arrival_counts=self.arrival_counts,
            values=self.values,
            steps=self.steps,
            trials=self.trials,
            seed=self.seed,
            metric=self.metric,
            discount=self.discount,
            burn_in=self.burn_in,
            initial_stake=self.initial_stake,
        )


def _pairs(raw: str, what: str) -> list[tuple[str, str]]:
    out = []
    for item in raw.split(","):
        item = item.strip()
        if not item:
            continue
        if ":" not in item:
            raise ConfigError(f"{what} entries must look like value:prob, got {item!r}")
        lhs, rhs = item.split(":", 1)
        out.append((lhs.strip(), rhs.strip()))
    if not out:
        raise ConfigError(f"{what} must be nonempty")
    return out


def _values_dist(section: configparser.SectionProxy) -> ValueDistribution:
    kind = section.get("kind", "discrete").strip().lower()
    if kind == "discrete":
        pairs = _pairs(section.get("points", ""), "[values] points")
        return Discrete(
            points=tuple(float(v) for v, _ in pairs),
            probs=tuple(float(p) for _, p in pairs),
        )
    if kind == "uniform":
        return Uniform(section.getfloat("lo", 0.0), section.getfloat("hi", 1.0))
    if kind == "exponential":
        if "rate" in section:
            return Exponential(section.getfloat("rate"), ExpConvention.RATE)
        if "scale" in section:
            return Exponential(section.getfloat("scale"), ExpConvention.SCALE)
        raise ConfigError("[values] exponential needs a rate or scale key")
    if kind == "pareto":
        convention = (
            ParetoConvention.LOMAX
            if section.get("convention", "").strip().lower() == "lomax"
            else ParetoConvention.SHAPE_SCALE
        )
        return Pareto(section.getfloat("shape"), section.getfloat("scale"), convention)
    raise ConfigError(f"unknown value distribution kind {kind!r}")


def load_experiment(path: str | Path) -> ExperimentSpec:
    path = Path(path)
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc

    try:
        exp = parser["experiment"]
        name = exp.get("name", path.stem)
        metric = exp.get("metric", "discounted").strip()
        steps = exp.getint("steps")
        trials = exp.getint("trials", 1)
        seed = exp.getint("seed", 0)
        discount = exp.getfloat("discount", fallback=None)
        burn_in = exp.getint("burn_in", 0)
        bin_width = exp.getfloat("bin_width", 0.1)

        cons = parser["constraints"]
        mode = (
            ConstraintMode.FRACTION_OF_STAKE
            if cons.get("mode", "absolute").strip() == "fraction"
            else ConstraintMode.ABSOLUTE_COUNT
        )
        windows = [
            Constraint(Fraction(d) if mode is ConstraintMode.FRACTION_OF_STAKE else int(d), int(w))
            for d, w in _pairs(cons.get("windows", ""), "[constraints] windows")
        ]
        constraints = ConstraintSet(windows, mode)
        initial_stake = cons.getint("initial_stake", fallback=None)

        arr = parser["arrivals"]
        count_pairs = _pairs(arr.get("counts", ""), "[arrivals] counts")
        arrival_counts = Discrete(
            points=tuple(int(v) for v, _ in count_pairs),
            probs=tuple(float(p) for _, p in count_pairs),
        )

        values = _values_dist(parser["values"])

        mech = parser["mechanisms"]
        names = tuple(
            tok.strip() for tok in mech.get("list", "").split(",") if tok.strip()
        )
        if not names:
            raise ConfigError("[mechanisms] list must name at least one mechanism")
        alpha = mech.getfloat("alpha", 0.9)
        rate = mech.getint("rate", 1)
        sort_key = mech.get("sort_key", "cost").strip()
        constant_sort = mech.get("constant_sort", "cost").strip()

        policy_spec = None
        if parser.has_section("policy"):
            pol = parser["policy"]
            budget_default, window_default = None, None
            if constraints.mode is ConstraintMode.ABSOLUTE_COUNT and len(constraints) == 1:
                budget_default = int(constraints[0].delta)
                window_default = constraints[0].window
            budget = pol.getint("budget", fallback=budget_default)
            window = pol.getint("window", fallback=window_default)
            if budget is None or window is None:
                raise ConfigError("[policy] needs budget and window (or a single absolute constraint)")
            high_prob = pol.getfloat("high_prob", fallback=None)
            if high_prob is None:
                if isinstance(values, Discrete) and len(values.points) == 2:
                    hi = max(values.points)
                    high_prob = values.probs[values.points.index(hi)]
                else:
                    raise ConfigError("[policy] needs high_prob unless values has two points")
            rel = pol.get("path", f"policies/{name}.policy")
            policy_spec = PolicySpec(
                cap=pol.getint("cap", 10),
                budget=budget,
                window=window,
                tolerance=pol.getfloat("tolerance", 1e-9),
                high_prob=high_prob,
                path=(path.parent / rel).resolve(),
            )
    except KeyError as exc:
        raise ConfigError(f"config {path} is missing section {exc}") from exc
    except (ValueError, configparser.Error) as exc:
        raise ConfigError(f"config {path}: {exc}") from exc

    return ExperimentSpec(
        name=name,
        metric=metric,
        constraints=constraints,
        arrival_counts=arrival_counts,
        values=values,
        steps=steps,
        trials=trials,
        seed=seed,
        discount=discount,
        burn_in=burn_in,
        initial_stake=initial_stake,
        mechanism_names=names,
        alpha=alpha,
        rate=rate,
        sort_key=sort_key,
        constant_sort=constant_sort,
        bin_width=bin_width,
        policy=policy_spec,
    )


def _arrival_model(spec: ExperimentSpec) -> ArrivalModel:
    if not isinstance(spec.values, Discrete) or len(spec.values.points) != 2:
        raise ConfigError("the solved policy needs a two-point value distribution")
    lo, hi = sorted(spec.values.points)
    assert spec.policy is not None
    return ArrivalModel(
        count_dist=spec.arrival_counts.as_count_dist(),
        high_prob=spec.policy.high_prob,
        cost_low=lo,
        cost_high=hi,
    )


def _solve(spec: ExperimentSpec) -> Policy:
    if spec.policy is None:
        raise ConfigError("config has no [policy] section")
    if spec.discount is None:
        raise ConfigError("solving needs a discount factor")
    model = build_model(
        _arrival_model(spec),
        cap=spec.policy.cap,
        budget=spec.policy.budget,
        window=spec.policy.window,
        discount=spec.discount,
    )
    return value_iteration(model, tolerance=spec.policy.tolerance)


def _materialize_policy(spec: ExperimentSpec) -> Policy:
    """Load the cached policy file, solving and caching it if absent."""
    assert spec.policy is not None
    cache = spec.policy.path
    if cache.exists():
        policy = load_policy(cache)
        ok = (
            policy.space.cap == spec.policy.cap
            and policy.space.budget == spec.policy.budget
            and policy.space.window == spec.policy.window
            and policy.discount == spec.discount
            and policy.tolerance == spec.policy.tolerance
        )
        if not ok:
            raise ConfigError(
                f"cached policy {cache} was solved for different parameters; "
                "delete it or point [policy] path elsewhere"
            )
        return policy
    policy = _solve(spec)
    cache.parent.mkdir(parents=True, exist_ok=True)
    cache.write_text(policy_text(policy), encoding="ascii")
    return policy


def _mechanisms(spec: ExperimentSpec) -> list[Mechanism | OptimalMechanism]:
    out: list[Mechanism | OptimalMechanism] = []
    for token in spec.mechanism_names:
        if token == "optimal":
            if spec.policy is None:
                raise ConfigError("mechanism 'optimal' needs a [policy] section")
            out.append(OptimalMechanism(_materialize_policy(spec), _arrival_model(spec)))
        elif token == "minslack":
            out.append(Mechanism.minslack())
        elif token == "prio-minslack":
            out.append(Mechanism.prio_minslack(sort_key=spec.sort_key))
        elif token == "alpha-minslack":
            out.append(Mechanism.alpha_minslack(spec.alpha, sort_key=spec.sort_key))
        elif token == "constant":
            out.append(Mechanism.constant(spec.rate, sort_key=spec.constant_sort))
        else:
            raise ConfigError(f"unknown mechanism {token!r}")
    return out


def _write_out(text: str, out: str | None) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def _fmt(x: float) -> str:
    return repr(float(x))


# =============================================================
# Subcommands
# =============================================================


def cmd_solve(args: argparse.Namespace) -> int:
    spec = load_experiment(args.config)
    if spec.policy is None:
        raise ConfigError("config has no [policy] section to solve")
    policy = _solve(spec)
    text = policy_text(policy)
    info = policy.info
    print(
        f"states={policy.space.n} iterations={info.iterations} residual={info.residual:.3e}"
    )
    target = Path(args.out) if args.out else spec.policy.path
    if args.check:
        if not target.exists():
            raise ConfigError(f"--check: no existing policy file at {target}")
        if target.read_bytes() != text.encode("ascii"):
            raise FeasibilityViolation(f"policy file {target} does not match regeneration")
        print(f"check ok: {target} matches regeneration")
        return EXIT_OK
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(text, encoding="ascii")
    print(f"wrote {target}")
    return EXIT_OK


def _apply_overrides(spec: ExperimentSpec, args: argparse.Namespace) -> ExperimentSpec:
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "trials", None) is not None:
        changes["trials"] = args.trials
    if not changes:
        return spec
    return replace(spec, **changes)


def cmd_simulate(args: argparse.Namespace) -> int:
    spec = _apply_overrides(load_experiment(args.config), args)
    rows = [SIMULATE_HEADER]
    for mech in _mechanisms(spec):
        summary = monte_carlo(spec.sim_config(mech), threads=args.threads)
        gamma = "" if summary.gamma is None else _fmt(summary.gamma)
        rows.append(
            ",".join(
                [
                    summary.mechanism,
                    summary.metric,
                    _fmt(summary.mean),
                    _fmt(summary.stderr),
                    _fmt(summary.p001),
                    _fmt(summary.p01),
                    _fmt(summary.p50),
                    str(summary.trials),
                    str(summary.steps),
                    gamma,
                    str(summary.seed),
                ]
            )
        )
    _write_out("\n".join(rows) + "\n", args.out)
    return EXIT_OK


def cmd_histogram(args: argparse.Namespace) -> int:
    spec = _apply_overrides(load_experiment(args.config), args)
    if spec.metric != "discounted":
        raise ConfigError("histograms are defined for the discounted metric")
    rows = [HISTOGRAM_HEADER]
    for mech in _mechanisms(spec):
        summary = monte_carlo(spec.sim_config(mech), threads=args.threads)
        for b in summary.histogram(spec.bin_width):
            rows.append(
                ",".join(
                    [
                        summary.mechanism,
                        _fmt(b.left),
                        _fmt(b.right),
                        str(b.count),
                        _fmt(b.density),
                        _fmt(b.log_density),
                    ]
                )
            )
    _write_out("\n".join(rows) + "\n", args.out)
    return EXIT_OK


def prio_action(state, budget: int) -> int:
    """The greedy slack-filling action for a decision state."""
    return min(budget - sum(state.history), state.w_low + state.w_high)


def cmd_policy_diff(args: argparse.Namespace) -> int:
    source = args.policy if args.policy else args.config
    if source is None:
        raise ConfigError("policy-diff needs a policy file path")
    policy = load_policy(source)
    space = policy.space
    diffs: dict[int, int] = {}
    big: list[str] = []
    hcols = [f"h{j + 1}" for j in range(space.window - 1)]
    for idx, s in enumerate(space.states):
        d = prio_action(s, space.budget) - int(policy.actions[idx])
        diffs[d] = diffs.get(d, 0) + 1
        if abs(d) >= 2:
            cells = [str(idx), str(s.w_low), str(s.w_high), *(str(h) for h in s.history)]
            cells.append(str(int(policy.actions[idx])))
            cells.append(str(prio_action(s, space.budget)))
            big.append(",".join(cells))
    lines = [f"states: {space.n}"]
    for d in sorted(diffs):
        lines.append(f"diff={d}: {diffs[d]}")
    lines.append("states with |diff| >= 2:")
    lines.append(",".join(["index", "w_low", "w_high", *hcols, "optimal", "greedy"]))
    lines.extend(big)
    _write_out("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def _verify_checks() -> list[tuple[str, bool, str]]:
    checks: list[tuple[str, bool, str]] = []

    n = len(enumerate_states(10, 5))
    checks.append(("state count (cap 10, budget 5)", n == 15246, f"got {n}"))

    amap = [alpha_capacity(Fraction(9, 10), s) for s in range(6)]
    checks.append(("alpha(0.9) capacity map", amap == [0, 1, 2, 3, 4, 4], f"got {amap}"))

    model = build_model(
        ArrivalModel(((0, 0.5), (1, 0.3), (2, 0.2)), 0.4, 1.0, 10.0),
        cap=3,
        budget=2,
        window=2,
        discount=0.9,
    )
    sums_ok = all(
        np.allclose(model.table.row_sums(a), 1.0, atol=1e-12)
        for a in range(model.space.budget + 1)
    )
    checks.append(("transition rows sum to 1", sums_ok, ""))

    policy = value_iteration(model, tolerance=1e-9)
    legal_ok = all(
        int(policy.actions[i]) in legal_actions(s, 2) for i, s in enumerate(model.space.states)
    )
    checks.append(("solved actions are legal", legal_ok, ""))

    rng = np.random.default_rng(7)
    dominance_ok = True
    detail = ""
    for case in range(100):
        horizon = int(rng.integers(2, 7))
        k = int(rng.integers(1, 4))
        cs = ConstraintSet(
            [
                Constraint(int(rng.integers(1, 4)), int(rng.integers(1, 4)))
                for _ in range(int(rng.integers(1, 3)))
            ],
            ConstraintMode.ABSOLUTE_COUNT,
        )
        reqs = [
            ExitRequest(f"r{i}", int(rng.integers(1, horizon + 1)), float(rng.integers(1, 5)))
            for i in range(int(rng.integers(1, 7)))
        ]
        reqs.sort(key=lambda r: r.requested_at)
        state = QueueState.initial(cs, arrivals=[r for r in reqs if r.requested_at == 1])
        trace = []
        for t in range(1, horizon + 1):
            sel = select_minslack(state)
            arrivals = [r for r in reqs if r.requested_at == t + 1]
            state = step(state, arrivals, sel)
            trace.append(len(sel))
        if not check_trace_feasible(tuple(trace), None, cs):
            dominance_ok, detail = False, f"case {case}: infeasible trace"
            break
        prefix = np.cumsum(trace)
        for sched in brute_force_schedules(reqs, cs, horizon):
            if np.any(np.cumsum(sched) > prefix):
                dominance_ok, detail = False, f"case {case}: dominated by {sched}"
                break
        if not dominance_ok:
            break
    checks.append(("greedy prefix dominance (100 instances)", dominance_ok, detail))
    return checks


def cmd_verify(args: argparse.Namespace) -> int:
    failed = False
    for name, ok, detail in _verify_checks():
        status = "PASS" if ok else "FAIL"
        suffix = f" ({detail})" if detail and not ok else ""
        print(f"{status} {name}{suffix}")
        failed = failed or not ok
    return EXIT_INVARIANT if failed else EXIT_OK


# =============================================================
# Entry point
# =============================================================


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="exitqueue",
        description="Rate-limited exit queue simulator and policy solver.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
        p.add_argument("--config", required=config_required, help="experiment config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--trials", type=int, default=None, help="override the trial count")
        p.add_argument("--out", default=None, help="output path (default stdout)")
        p.add_argument("--threads", type=int, default=1, help="worker threads for trials")
        p.add_argument("--check", action="store_true", help="verify instead of overwrite")

    p_solve = sub.add_parser("solve", help="solve the decision model and write a policy file")
    common(p_solve)
    p_solve.set_defaults(func=cmd_solve)

    p_sim = sub.add_parser("simulate", help="run the configured mechanisms, emit CSV")
    common(p_sim)
    p_sim.set_defaults(func=cmd_simulate)

    p_hist = sub.add_parser("histogram", help="emit binned metric densities as CSV")
    common(p_hist)
    p_hist.set_defaults(func=cmd_histogram)

    p_diff = sub.add_parser("policy-diff", help="compare a policy file to greedy slack filling")
    p_diff.add_argument("policy", nargs="?", default=None, help="policy file path")
    common(p_diff, config_required=False)
    p_diff.set_defaults(func=cmd_policy_diff)

    p_verify = sub.add_parser("verify", help="run built-in invariant cross-checks")
    common(p_verify, config_required=False)
    p_verify.set_defaults(func=cmd_verify)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InvalidAlpha) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonConvergence as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ModelMismatch, UnknownRequest) as exc:
        print(f"model mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except ExitQueueError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
