"""Command-line front-end: config parsing, CSV output, exit codes, caching.

Every test drives main() in-process with a config written to tmp_path, so
the assertions cover the same code paths as the installed console script.
"""

from __future__ import annotations

import math
from pathlib import Path

import pytest

from exitqueue import cli
from exitqueue.cli import HISTOGRAM_HEADER, SIMULATE_HEADER, load_experiment, main
from exitqueue.errors import NonConvergence

BASE = """\
[experiment]
name = tiny
metric = discounted
steps = 12
trials = 3
seed = 5
discount = 0.9
bin_width = 0.05

[constraints]
mode = absolute
windows = 2:3

[arrivals]
counts = 0:0.5, 1:0.4, 5:0.1

[values]
kind = discrete
points = 1:0.9, 10:0.1

[mechanisms]
list = minslack, prio-minslack, alpha-minslack, constant
alpha = 0.9
rate = 1
constant_sort = fcfs

[policy]
cap = 3
tolerance = 1e-9
path = policies/tiny.policy
"""


def _config(tmp_path: Path, text: str = BASE, name: str = "tiny.cfg") -> Path:
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def _rows(text: str) -> list[list[str]]:
    return [line.split(",") for line in text.strip().splitlines()]


# =============================================================
# Config parsing
# =============================================================


def test_load_experiment_parses_the_full_schema(tmp_path) -> None:
    spec = load_experiment(_config(tmp_path))
    assert spec.name == "tiny"
    assert spec.metric == "discounted"
    assert (spec.steps, spec.trials, spec.seed) == (12, 3, 5)
    assert spec.discount == 0.9
    assert [(int(c.delta), c.window) for c in spec.constraints] == [(2, 3)]
    assert spec.arrival_counts.points == (0, 1, 5)
    assert spec.values.points == (1.0, 10.0)
    assert spec.mechanism_names == (
        "minslack",
        "prio-minslack",
        "alpha-minslack",
        "constant",
    )
    # Budget and window default to the single absolute constraint, and
    # high_prob to the top point's probability.
    assert (spec.policy.cap, spec.policy.budget, spec.policy.window) == (3, 2, 3)
    assert spec.policy.high_prob == 0.1
    assert spec.policy.path == (tmp_path / "policies" / "tiny.policy").resolve()


def test_load_experiment_rejects_bad_configs(tmp_path) -> None:
    with pytest.raises(Exception):
        load_experiment(tmp_path / "missing.cfg")
    bad = _config(tmp_path, BASE.replace("windows = 2:3", "windows = "), "bad.cfg")
    from exitqueue.errors import ConfigError

    with pytest.raises(ConfigError):
        load_experiment(bad)
    nolist = _config(
        tmp_path, BASE.replace("list = minslack, prio-minslack, alpha-minslack, constant", "list ="),
        "nolist.cfg",
    )
    with pytest.raises(ConfigError):
        load_experiment(nolist)


# =============================================================
# simulate
# =============================================================


def test_simulate_emits_one_row_per_mechanism(tmp_path, capsys) -> None:
    assert main(["simulate", "--config", str(_config(tmp_path))]) == 0
    rows = _rows(capsys.readouterr().out)
    assert ",".join(rows[0]) == SIMULATE_HEADER
    names = [r[0] for r in rows[1:]]
    assert names == ["minslack", "prio-minslack", "alpha-minslack(0.9)", "constant(1)"]
    for r in rows[1:]:
        assert r[1] == "discounted"
        assert float(r[2]) <= 0.0
        assert (r[7], r[8], r[9], r[10]) == ("3", "12", "0.9", "5")


def test_simulate_output_is_byte_identical_across_runs(tmp_path) -> None:
    cfg = _config(tmp_path)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["simulate", "--config", str(cfg), "--out", str(a)]) == 0
    assert main(["simulate", "--config", str(cfg), "--out", str(b), "--threads", "4"]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_simulate_honors_overrides(tmp_path, capsys) -> None:
    cfg = _config(tmp_path)
    assert main(["simulate", "--config", str(cfg), "--seed", "9", "--trials", "2"]) == 0
    rows = _rows(capsys.readouterr().out)
    assert all((r[7], r[10]) == ("2", "9") for r in rows[1:])


def test_simulate_steady_state_leaves_gamma_blank(tmp_path, capsys) -> None:
    text = BASE.replace("metric = discounted", "metric = steady-state").replace(
        "discount = 0.9", "burn_in = 2"
    )
    cfg = _config(tmp_path, text, "steady.cfg")
    assert main(["simulate", "--config", str(cfg)]) == 0
    rows = _rows(capsys.readouterr().out)
    assert all(r[1] == "steady-state" and r[9] == "" for r in rows[1:])


def test_simulate_with_optimal_solves_and_caches(tmp_path, capsys) -> None:
    text = BASE.replace("list = minslack, prio-minslack, alpha-minslack, constant",
                        "list = optimal, prio-minslack")
    cfg = _config(tmp_path, text, "opt.cfg")
    cache = tmp_path / "policies" / "tiny.policy"
    assert not cache.exists()
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "x.csv")]) == 0
    assert cache.exists()
    first = cache.read_bytes()
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "y.csv")]) == 0
    assert cache.read_bytes() == first
    assert (tmp_path / "x.csv").read_bytes() == (tmp_path / "y.csv").read_bytes()
    rows = _rows((tmp_path / "x.csv").read_text())
    assert [r[0] for r in rows[1:]] == ["optimal", "prio-minslack"]


def test_corrupt_policy_cache_is_a_model_mismatch(tmp_path) -> None:
    text = BASE.replace("list = minslack, prio-minslack, alpha-minslack, constant",
                        "list = optimal")
    cfg = _config(tmp_path, text, "opt.cfg")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "x.csv")]) == 0
    cache = tmp_path / "policies" / "tiny.policy"
    lines = cache.read_text(encoding="ascii").splitlines()
    cache.write_text("\n".join(lines[:-1]) + "\n", encoding="ascii")
    assert main(["simulate", "--config", str(cfg)]) == 4


def test_stale_policy_cache_parameters_are_a_config_error(tmp_path) -> None:
    text = BASE.replace("list = minslack, prio-minslack, alpha-minslack, constant",
                        "list = optimal")
    cfg = _config(tmp_path, text, "opt.cfg")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "x.csv")]) == 0
    retuned = _config(tmp_path, text.replace("tolerance = 1e-9", "tolerance = 1e-6"), "re.cfg")
    assert main(["simulate", "--config", str(retuned)]) == 2


# =============================================================
# solve
# =============================================================


def test_solve_writes_then_check_verifies(tmp_path, capsys) -> None:
    cfg = _config(tmp_path)
    target = tmp_path / "policies" / "tiny.policy"
    assert main(["solve", "--config", str(cfg)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("states=")
    assert target.exists()

    assert main(["solve", "--config", str(cfg), "--check"]) == 0
    assert "check ok" in capsys.readouterr().out

    data = bytearray(target.read_bytes())
    data[-2] = ord("9") if data[-2] != ord("9") else ord("8")
    target.write_bytes(bytes(data))
    assert main(["solve", "--config", str(cfg), "--check"]) == 5


def test_solve_check_without_file_is_a_config_error(tmp_path) -> None:
    cfg = _config(tmp_path)
    assert main(["solve", "--config", str(cfg), "--check"]) == 2


def test_solve_zero_capacity_model(tmp_path, capsys) -> None:
    text = BASE.replace("windows = 2:3", "windows = 0:1").replace("cap = 3", "cap = 0")
    cfg = _config(tmp_path, text, "zero.cfg")
    assert main(["solve", "--config", str(cfg)]) == 0
    assert "states=1 " in capsys.readouterr().out
    body = (tmp_path / "policies" / "tiny.policy").read_text(encoding="ascii").splitlines()
    assert len(body) == 4
    # The single state can only ever pick action 0.
    assert body[3].split(",")[-2] == "0"


def test_solve_without_policy_section(tmp_path) -> None:
    text = BASE[: BASE.index("[policy]")]
    cfg = _config(tmp_path, text, "nopolicy.cfg")
    assert main(["solve", "--config", str(cfg)]) == 2


# =============================================================
# histogram
# =============================================================


def test_histogram_density_normalizes(tmp_path, capsys) -> None:
    text = BASE.replace("trials = 3", "trials = 40")
    cfg = _config(tmp_path, text)
    assert main(["histogram", "--config", str(cfg)]) == 0
    rows = _rows(capsys.readouterr().out)
    assert ",".join(rows[0]) == HISTOGRAM_HEADER
    by_mech: dict[str, float] = {}
    for mech, left, right, count, density, log_density in rows[1:]:
        width = float(right) - float(left)
        assert width == pytest.approx(0.05)
        assert float(log_density) == pytest.approx(math.log(float(density)))
        by_mech[mech] = by_mech.get(mech, 0.0) + float(density) * 0.05
    assert set(by_mech) == {"minslack", "prio-minslack", "alpha-minslack(0.9)", "constant(1)"}
    for total in by_mech.values():
        assert total == pytest.approx(1.0, abs=1e-9)


def test_histogram_rejects_steady_state(tmp_path) -> None:
    text = BASE.replace("metric = discounted", "metric = steady-state")
    cfg = _config(tmp_path, text, "steady.cfg")
    assert main(["histogram", "--config", str(cfg)]) == 2


# =============================================================
# policy-diff
# =============================================================


def test_policy_diff_reports_structure(tmp_path, capsys) -> None:
    cfg = _config(tmp_path)
    assert main(["solve", "--config", str(cfg)]) == 0
    capsys.readouterr()
    policy_file = tmp_path / "policies" / "tiny.policy"
    assert main(["policy-diff", str(policy_file)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("states: ")
    n = int(lines[0].split(": ")[1])
    hist_lines = [ln for ln in lines if ln.startswith("diff=")]
    assert sum(int(ln.split(": ")[1]) for ln in hist_lines) == n
    idx = lines.index("states with |diff| >= 2:")
    assert lines[idx + 1] == "index,w_low,w_high,h1,h2,optimal,greedy"
    listed = len(lines) - idx - 2
    big = sum(
        int(ln.split(": ")[1])
        for ln in hist_lines
        if abs(int(ln.split(":")[0].split("=")[1])) >= 2
    )
    assert listed == big


def test_policy_diff_bad_file_is_a_config_error(tmp_path) -> None:
    missing = tmp_path / "nope.policy"
    assert main(["policy-diff", str(missing)]) == 2
    garbled = tmp_path / "garbled.policy"
    garbled.write_text("not,a,policy\n", encoding="ascii")
    assert main(["policy-diff", str(garbled)]) == 2
    assert main(["policy-diff"]) == 2


# =============================================================
# verify and exit codes
# =============================================================


def test_verify_reports_all_pass(capsys) -> None:
    assert main(["verify"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 5
    assert all(ln.startswith("PASS ") for ln in lines)


def test_missing_config_is_a_config_error(tmp_path) -> None:
    assert main(["simulate", "--config", str(tmp_path / "none.cfg")]) == 2


def test_malformed_ini_is_a_config_error(tmp_path) -> None:
    bad = tmp_path / "broken.cfg"
    bad.write_text("this is not ini at all\n", encoding="utf-8")
    assert main(["simulate", "--config", str(bad)]) == 2


def test_unknown_mechanism_is_a_config_error(tmp_path) -> None:
    text = BASE.replace("list = minslack, prio-minslack, alpha-minslack, constant",
                        "list = fifo")
    cfg = _config(tmp_path, text, "bad.cfg")
    assert main(["simulate", "--config", str(cfg)]) == 2


def test_solver_failure_maps_to_exit_three(tmp_path, monkeypatch) -> None:
    cfg = _config(tmp_path)

    def explode(*args, **kwargs):
        raise NonConvergence("did not converge")

    monkeypatch.setattr(cli, "value_iteration", explode)
    assert main(["solve", "--config", str(cfg)]) == 3
