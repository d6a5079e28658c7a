"""Acceptance criteria 1-10, one test each.

Every test records a PASS/FAIL line; the block is printed at the end of the
module (also when run directly with `python tests/test_acceptance.py`).
Set FEDSPS_LIBSVM to a binary LIBSVM file (e.g. mushrooms) for criterion 9;
otherwise a synthetic file with the same shape is generated.
"""
import os
import statistics
import time
from pathlib import Path

import numpy as np
import pytest
import yaml

from fedsps.cli import DEFAULT_GRID, ExperimentConfig, build_experiment, grid_best, grid_search, main
from fedsps.data import format_libsvm, synth_binary_libsvm
from fedsps.fedsim import Method, run
from fedsps.metrics import BOUND_SLACK, plateau, neighborhood_bound, verify_decsps_rate, verify_linear_rate
from fedsps.problems import (
    client_loss,
    two_curvature_adaptive_iterations,
    two_curvature_instance,
    two_curvature_minibatch_iterations,
)
from fedsps.stepsize import StepsizeConfig
from fedsps import suites

RESULTS = {}
TAU = 5


def record(n, passed, elapsed, limit, detail):
    ok = bool(passed) and (limit is None or elapsed < limit)
    budget = "" if limit is None else f" (limit {limit:g}s)"
    RESULTS[n] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {elapsed:7.2f}s{budget}  {detail}"
    return ok


@pytest.fixture(scope="module", autouse=True)
def summary(request):
    yield
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")
    write = reporter.write_line if reporter else print
    write("")
    for n in sorted(RESULTS):
        write(RESULTS[n])


@pytest.fixture(scope="module")
def hetero():
    return suites.heterogeneous_problem()


def test_criterion_01_stepsize_invariants():
    start = time.perf_counter()
    verdicts = suites.stepsize_suite(n=100_000, include_b_le_a=True)
    elapsed = time.perf_counter() - start
    failed = [f"{v.name}={v.observed:g}/{v.details['inputs']}" for v in verdicts if not v.passed]
    ok = record(1, not failed, elapsed, 10, "failing: " + (", ".join(failed) or "none"))
    # the b <= a ordering does not hold in general (see README); the rest must
    assert all(v.passed for v in verdicts if v.name != "aggregation_b_le_a")
    assert ok


def test_criterion_02_heterogeneity_bounds():
    start = time.perf_counter()
    verdicts = suites.heterogeneity_suite(instances=1000)
    elapsed = time.perf_counter() - start
    worst = max(v.observed for v in verdicts)
    assert record(2, all(v.passed for v in verdicts), elapsed, 30, f"1000 instances, violations {worst:g}")


def test_criterion_03_fedavg_equivalence():
    start = time.perf_counter()
    v = suites.fedavg_equivalence(rounds=100, tau=TAU)
    elapsed = time.perf_counter() - start
    assert record(3, v.passed, elapsed, 10, f"gamma_b={v.details['gamma_b']:.4g}, max |diff| {v.observed:g}")


def test_criterion_04_interpolation_linear_rate():
    start = time.perf_counter()
    h = suites.interpolation_run(rounds=500)
    v = verify_linear_rate(h, suites.INTERPOLATION_MU, suites.INTERPOLATION_ALPHA)
    elapsed = time.perf_counter() - start
    hit = next((tr.round for tr in h.rounds if tr.dist_sq < 1e-10), None)
    r2 = v.details.get("r2", float("nan"))
    ok = v.passed and hit is not None and r2 > 0.95
    assert record(4, ok, elapsed, 60, f"dist<1e-10 at round {hit}, R^2 {r2:.5f}, rate {v.observed:.4f}")


def test_criterion_05_neighborhood_ordering(hetero):
    start = time.perf_counter()
    problem, shards, rep = hetero
    c = 2 * TAU**2
    rows = []
    for gamma_b in (0.01, 0.1, 1.0):
        h = suites.heterogeneous_run(Method.FEDSPS, StepsizeConfig(c=c, gamma_b=gamma_b), data=hetero)
        bound = neighborhood_bound(c, gamma_b, rep.smoothness_L, h.iterations, h.initial_dist_sq, rep.sigma_f_sq)
        rows.append((gamma_b, plateau(h), bound))
    elapsed = time.perf_counter() - start
    plateaus = [p for _, p, _ in rows]
    ordered = all(a <= b for a, b in zip(plateaus, plateaus[1:]))
    within = all(p <= b * BOUND_SLACK for _, p, b in rows)
    detail = ", ".join(f"gb={g:g}: {p:.4g}<={b:.4g}" for g, p, b in rows)
    assert record(5, ordered and within, elapsed, 120, detail)


def test_criterion_06_feddecsps_exact_convergence(hetero):
    start = time.perf_counter()
    dec = suites.heterogeneous_run(Method.FEDDECSPS, StepsizeConfig(gamma_b=1.0, dec_schedule="theory"), data=hetero)
    sps = suites.heterogeneous_run(Method.FEDSPS, StepsizeConfig(c=2 * TAU**2, gamma_b=1.0), data=hetero)
    v = verify_decsps_rate(dec, hetero[2])
    elapsed = time.perf_counter() - start
    ref = plateau(sps)
    twice = v.observed * 2 <= ref
    detail = (
        f"T={dec.iterations}, avg subopt {v.observed:.4g} <= bound {v.bound:.4g}: {v.passed}; "
        f"2x below FedSPS plateau {ref:.4g}: {twice}"
    )
    ok = record(6, v.passed and twice, elapsed, 120, detail)
    assert v.passed
    assert ok


def test_criterion_07_two_curvature_clients():
    start = time.perf_counter()
    a = 100.0
    ex = two_curvature_instance(a)
    budget = 100_000
    mb = two_curvature_minibatch_iterations(a, 2.0 / ex.L, max_iter=budget)
    # never converging counts as the whole budget
    mb_count = budget + 1 if mb is None else mb
    gen = np.random.default_rng(0)
    draws = gen.uniform(0.5, 1.5, size=(100, 2)) * np.array(ex.gamma_star)
    adaptive = statistics.median(two_curvature_adaptive_iterations(a, tuple(g)) for g in draws)
    elapsed = time.perf_counter() - start
    ratio = mb_count / max(adaptive, 1)
    detail = f"mini-batch {'never (budget ' + str(budget) + ')' if mb is None else mb}, adaptive median {adaptive:g}, ratio {ratio:.4g}"
    assert record(7, ratio >= 50, elapsed, 5, detail)


def test_criterion_08_gradient_checks():
    from test_problems import _oracles, gradient_errors

    start = time.perf_counter()
    worst = {name: float(gradient_errors(problem).max()) for name, problem in _oracles()}
    elapsed = time.perf_counter() - start
    detail = ", ".join(f"{k} {v:.2g}" for k, v in worst.items())
    assert record(8, max(worst.values()) < 1e-5, elapsed, 5, f"25 probes each, max rel err {detail}")


def libsvm_path(tmp_dir):
    given = os.environ.get("FEDSPS_LIBSVM")
    if given:
        return Path(given), "provided"
    path = Path(tmp_dir) / "synthetic_mushrooms.svm"
    path.write_text(format_libsvm(synth_binary_libsvm()))
    return path, "synthetic"


def test_criterion_09_libsvm_end_to_end(tmp_path):
    start = time.perf_counter()
    path, origin = libsvm_path(tmp_path)
    cfg = ExperimentConfig(
        problem={"kind": "logistic", "dataset": str(path)},
        partition={"mode": "iid", "n_total": 10},
        federation={"method": "fedsps", "tau": TAU, "rounds": 500, "batch_size": 20},
        stepsize={"c": 0.5, "gamma_b": 1.0},
    )
    problem, shards, _ = build_experiment(cfg)
    h = run(cfg.federation_config(), problem, shards, threads=8)
    sps_loss = client_loss(problem, h.x_final, shards)
    best = grid_best(grid_search(cfg, DEFAULT_GRID, threads=8, problem=problem, shards=shards))
    elapsed = time.perf_counter() - start
    ok = best is not None and sps_loss <= 1.1 * best["final_loss"]
    detail = f"{origin} data, FedSPS {sps_loss:.5g} vs FedAvg best {best['final_loss']:.5g} (gamma {best['gamma']:g})"
    assert record(9, ok, elapsed, 600, detail)


def test_criterion_10_determinism(tmp_path):
    start = time.perf_counter()
    body = {
        "seed": 3,
        "problem": {"kind": "least_squares", "synth": {"samples": 200, "features": 10, "noise": 0.5, "heterogeneity": 1.0, "scale": 10.0}},
        "partition": {"mode": "contiguous", "n_total": 10},
        "federation": {"method": "feddecsps", "tau": TAU, "rounds": 200, "batch_size": 20},
        "stepsize": {"dec_schedule": "theory"},
    }
    cfg = tmp_path / "acc.yaml"
    cfg.write_text(yaml.safe_dump(body))
    blobs = []
    for i, threads in enumerate((1, 8, 1, 8)):
        out = tmp_path / f"o{i}"
        assert main(["run", "--config", str(cfg), "--out", str(out), "--threads", str(threads)]) == 0
        blobs.append((out / "trace.csv").read_bytes())
    eq = suites.fedavg_equivalence(threads=8).observed == suites.fedavg_equivalence(threads=1).observed
    elapsed = time.perf_counter() - start
    ok = len(set(blobs)) == 1 and suites.thread_determinism().passed and eq
    assert record(10, ok, elapsed, None, f"4 CLI runs (threads 1/8) identical: {len(set(blobs)) == 1}")


if __name__ == "__main__":
    import sys

    sys.path.insert(0, str(Path(__file__).parent))
    raise SystemExit(pytest.main([__file__, "-q"]))
