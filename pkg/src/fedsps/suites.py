"""Built-in verification suites driven by ``fedsps verify``.

Each suite returns a list of :class:`~fedsps.metrics.Verdict`. Fuzz suites
report the number of failing inputs as ``observed`` against a bound of 0.
"""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np

from fedsps import rng as rngmod
from fedsps.data import shards_from_index_lists, synth_regression
from fedsps.fedsim import FederationConfig, Method, reference_run, run
from fedsps.metrics import (
    Verdict,
    traces_to_csv,
    verify_consensus_bound,
    verify_decsps_rate,
    verify_linear_rate,
    verify_neighborhood,
)
from fedsps.problems import LeastSquares, compute_heterogeneity, least_squares_optimum, make_problem
from fedsps.stepsize import (
    AggregationFormula,
    StepsizeConfig,
    StepsizeState,
    Variant,
    aggregate_global,
    decsps_bounds,
    feddecsps,
    fundamental_inequality_check,
    sps_bounds,
    sps_max,
)

SUITES = ("stepsize", "heterogeneity", "equivalence", "convergence")
BOUND_RTOL = 1e-12


def _count(name, failures, n, **details):
    return Verdict(name, failures == 0, float(failures), 0.0, 0.0, {"inputs": n, **details})


def _log_uniform(gen, lo, hi, size=None):
    return np.exp(gen.uniform(math.log(lo), math.log(hi), size))


def _smooth_pairs(gen, L, dim=3):
    """Loss gaps and gradients an L-smooth function bounded below by 0 can
    produce, ||g||^2 <= 2 L (F - l*). ``L`` is an array; one pair per entry."""
    L = np.asarray(L, dtype=float)
    g = gen.standard_normal(L.shape + (dim,)) * _log_uniform(gen, 1e-4, 1e2, L.shape)[..., None]
    gsq = np.einsum("...i,...i->...", g, g)
    return gsq / (2.0 * L) * _log_uniform(gen, 1.0, 1e3, L.shape), g, gsq


def _configs(gen, n):
    return _log_uniform(gen, 0.1, 100.0, n), _log_uniform(gen, 1e-4, 1e2, n), _log_uniform(gen, 1e-3, 1e3, n)


def fuzz_sps(n: int, seed: int = 0) -> list[Verdict]:
    """SPS_max lower/upper bounds and the fundamental inequality."""
    gen = rngmod.stream(seed, rngmod.VERIFY, 1)
    cs, caps, Ls = _configs(gen, n)
    gaps, _, gsqs = _smooth_pairs(gen, Ls)
    bound_fail = ineq_fail = 0
    for c, cap, L, gap, gsq in zip(cs.tolist(), caps.tolist(), Ls.tolist(), gaps.tolist(), gsqs.tolist()):
        cfg = StepsizeConfig(c=c, gamma_b=cap)
        gamma = sps_max(gap, gsq, cfg)
        lo, hi = sps_bounds(cfg, L)
        if not (lo * (1 - BOUND_RTOL) <= gamma <= hi):
            bound_fail += 1
        if not fundamental_inequality_check(gamma, gap, gsq, cfg):
            ineq_fail += 1
    return [_count("sps_bounds", bound_fail, n), _count("fundamental_inequality", ineq_fail, n)]


def fuzz_decsps(n: int, seed: int = 0, chain: int = 10) -> list[Verdict]:
    """Decreasing-SPS bounds and monotonicity over random chains of ``chain`` steps."""
    gen = rngmod.stream(seed, rngmod.VERIFY, 2)
    chains = max(1, n // chain)
    c0s, caps, Ls = _configs(gen, chains)
    starts = gen.integers(0, 10_000, chains)
    gaps, _, gsqs = _smooth_pairs(gen, np.repeat(Ls, chain).reshape(chains, chain))
    bound_fail = mono_fail = ineq_fail = 0
    for j in range(chains):
        L, t0 = float(Ls[j]), int(starts[j])
        cfg = StepsizeConfig(variant=Variant.FEDDECSPS, c0=float(c0s[j]), gamma_b=float(caps[j]))
        state = StepsizeState(t=t0, prev_gamma=cfg.gamma_b, prev_ct=cfg.c0, current_cap=cfg.gamma_b)
        if t0:
            # enter the chain mid-run at the largest reachable gamma_{t0-1}
            state = replace(state, prev_gamma=cfg.gamma_b / math.sqrt(t0), prev_ct=cfg.c0 * math.sqrt(t0))
        prev = state.prev_gamma
        for k, (gap, gsq) in enumerate(zip(gaps[j].tolist(), gsqs[j].tolist())):
            t = t0 + k
            gamma, state = feddecsps(gap, gsq, cfg, state, t=t)
            lo, hi = decsps_bounds(cfg, t, L)
            if not (lo * (1 - BOUND_RTOL) <= gamma <= hi * (1 + BOUND_RTOL)):
                bound_fail += 1
            if gamma > prev:
                mono_fail += 1
            if not fundamental_inequality_check(gamma, gap, gsq, cfg, c=cfg.c0 * math.sqrt(t + 1)):
                ineq_fail += 1
            prev = gamma
    total = chains * chain
    return [
        _count("decsps_bounds", bound_fail, total),
        _count("decsps_monotone", mono_fail, total),
        _count("decsps_fundamental_inequality", ineq_fail, total),
    ]


def fuzz_aggregation(n: int, seed: int = 0, include_b_le_a: bool = True) -> list[Verdict]:
    """Ordering of the three global stepsize formulas on random client statistics.

    gamma^(b) <= gamma^(c) always holds. gamma^(b) <= gamma^(a) does not hold in
    general (see the tests for a two-client counterexample); it is reported
    only when ``include_b_le_a`` is set.
    """
    gen = rngmod.stream(seed, rngmod.VERIFY, 3)
    cs, caps, _ = _configs(gen, n)
    sizes = gen.integers(2, 11, n)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    gaps, grads, gsqs = _smooth_pairs(gen, _log_uniform(gen, 1e-3, 1e3, int(offsets[-1])))
    gaps, gsqs = gaps.tolist(), gsqs.tolist()
    b_le_c = b_le_a = 0
    worst = None
    for j in range(n):
        cfg = StepsizeConfig(c=float(cs[j]), gamma_b=float(caps[j]))
        lo, hi = int(offsets[j]), int(offsets[j + 1])
        stats = list(zip(gaps[lo:hi], gsqs[lo:hi]))
        a = aggregate_global(stats, cfg, AggregationFormula.A)
        b = aggregate_global(stats, cfg, AggregationFormula.B)
        c = aggregate_global(stats, cfg, AggregationFormula.C, grads=grads[lo:hi])
        if b > c * (1 + BOUND_RTOL):
            b_le_c += 1
        if b > a * (1 + BOUND_RTOL):
            b_le_a += 1
            if worst is None:
                worst = {"a": a, "b": b, "stats": stats}
    out = [_count("aggregation_b_le_c", b_le_c, n)]
    if include_b_le_a:
        out.append(_count("aggregation_b_le_a", b_le_a, n, first_counterexample=worst))
    return out


def stepsize_suite(n: int = 20_000, seed: int = 0, include_b_le_a: bool = False) -> list[Verdict]:
    return fuzz_sps(n, seed) + fuzz_decsps(n, seed) + fuzz_aggregation(n, seed, include_b_le_a)


def random_quadratic(gen) -> tuple[LeastSquares, list]:
    """A least-squares federation with 2-10 clients of random sizes, curvatures and targets."""
    n = int(gen.integers(2, 11))
    d = int(gen.integers(1, 9))
    sizes = gen.integers(1, 9, size=n)
    blocks = [gen.standard_normal((int(s), d)) * _log_uniform(gen, 0.1, 10.0) for s in sizes]
    A = np.vstack(blocks)
    b = gen.standard_normal(len(A)) * _log_uniform(gen, 0.01, 10.0)
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    shards = shards_from_index_lists([np.arange(bounds[i], bounds[i + 1]) for i in range(n)], 0)
    return LeastSquares(A, b), shards


def heterogeneity_suite(instances: int = 1000, seed: int = 0, rtol: float = 1e-9) -> list[Verdict]:
    gen = rngmod.stream(seed, rngmod.VERIFY, 4)
    zeta_fail = sigma_fail = 0
    worst = 0.0
    for _ in range(instances):
        problem, shards = random_quadratic(gen)
        rep = compute_heterogeneity(problem, shards)
        ok_zeta, ok_sigma = rep.dissimilarity_bounds_hold(rtol)
        zeta_fail += not ok_zeta
        sigma_fail += not ok_sigma
        bound = 2.0 * rep.smoothness_L * rep.sigma_f_sq
        if bound > 0:
            worst = max(worst, rep.zeta_star_sq / bound, rep.sigma_star_sq / bound)
    return [
        _count("zeta_star_le_2L_sigma_f", zeta_fail, instances, worst_ratio=worst),
        _count("sigma_star_le_2L_sigma_f", sigma_fail, instances, worst_ratio=worst),
    ]


def equivalence_problem(seed: int = 0):
    ds, shards = synth_regression(200, 20, 10, noise=0.3, heterogeneity=0.5, seed=seed)
    return make_problem("least_squares", ds), shards


def fedavg_equivalence(rounds: int = 100, tau: int = 5, seed: int = 0, threads: int = 1) -> Verdict:
    """With gamma_b = 0.1 / (2cL) every Polyak value exceeds the cap, so FedSPS is FedAvg."""
    problem, shards = equivalence_problem(seed)
    L = problem.sample_smoothness()
    c = 0.5
    gamma_b = 0.1 / (2 * c * L)
    base = FederationConfig(tau=tau, rounds=rounds, batch_size=5, master_seed=seed, stepsize=StepsizeConfig(c=c, gamma_b=gamma_b))
    sps = run(replace(base, method=Method.FEDSPS), problem, shards, threads=threads)
    avg = run(replace(base, method=Method.FEDAVG), problem, shards, threads=threads)
    same = traces_to_csv(sps.rounds) == traces_to_csv(avg.rounds) and sps.x_final.tobytes() == avg.x_final.tobytes()
    diff = float(np.max(np.abs(sps.x_final - avg.x_final)))
    return Verdict("fedsps_equals_fedavg", same, diff, 0.0, 0.0, {"rounds": rounds, "gamma_b": gamma_b})


def reference_equivalence(seed: int = 0) -> list[Verdict]:
    """The simulator against the plain-loop oracle: tau=1, n=1 (sequential SPS)
    and the full 10-client federation for every method it covers."""
    problem, shards = equivalence_problem(seed)
    out = []
    cases = [
        ("sequential_sps", [shards_from_index_lists([np.concatenate([s.indices for s in shards])], seed)[0]], Method.FEDSPS, 1),
        ("federated_fedsps", shards, Method.FEDSPS, 5),
        ("federated_feddecsps", shards, Method.FEDDECSPS, 5),
        ("federated_fedavg", shards, Method.FEDAVG, 5),
    ]
    for name, sh, method, tau in cases:
        cfg = FederationConfig(method=method, tau=tau, rounds=20, batch_size=5, master_seed=seed, stepsize=StepsizeConfig(gamma_b=0.05))
        h = run(cfg, problem, sh, record_rounds=True)
        ref = reference_run(cfg, problem, sh)
        same = all(a["x_avg"].tobytes() == b.tobytes() for a, b in zip(h.log, ref))
        out.append(Verdict(f"reference_{name}", same, 0.0 if same else 1.0, 0.0, 0.0, {"rounds": cfg.rounds}))
    return out


def thread_determinism(seed: int = 0, threads: int = 8) -> Verdict:
    problem, shards = equivalence_problem(seed)
    cfg = FederationConfig(method=Method.FEDSPS, rounds=30, batch_size=5, master_seed=seed)
    one = traces_to_csv(run(cfg, problem, shards, threads=1).rounds)
    many = traces_to_csv(run(cfg, problem, shards, threads=threads).rounds)
    return Verdict("thread_determinism", one == many, 0.0 if one == many else 1.0, 0.0, 0.0, {"threads": threads})


def equivalence_suite(seed: int = 0) -> list[Verdict]:
    return [fedavg_equivalence(seed=seed)] + reference_equivalence(seed) + [thread_determinism(seed)]


# -- convergence -------------------------------------------------------------


def interpolation_problem(seed: int = 1):
    """Over-parameterized least squares (d=200, 10 clients x 10 samples) with
    orthonormal rows: interpolating, every nonzero curvature equal to 1/100."""
    ds, shards = synth_regression(100, 200, 10, seed=seed, design="orthogonal")
    problem = make_problem("least_squares", ds)
    return problem, shards, least_squares_optimum(problem, shards)


def interpolation_run(rounds: int = 500, batch_size: int = 20, seed: int = 1, threads: int = 1):
    problem, shards, x_star = interpolation_problem(seed)
    cfg = FederationConfig(
        method=Method.FEDSPS, tau=5, rounds=rounds, batch_size=batch_size, master_seed=seed,
        stepsize=StepsizeConfig(c=0.5, gamma_b=10.0),
    )
    return run(cfg, problem, shards, x_star=x_star, threads=threads)


# mu of the averaged objective on the row space, alpha = min(1/(2cL), gamma_b) with L = 1, c = 0.5
INTERPOLATION_MU = 0.01
INTERPOLATION_ALPHA = 1.0


def heterogeneous_problem(seed: int = 3):
    """Ten clients with shifted targets and noise: sigma_f^2 > 0."""
    ds, shards = synth_regression(200, 10, 10, noise=0.5, heterogeneity=1.0, seed=seed, scale=10.0)
    problem = make_problem("least_squares", ds)
    return problem, shards, compute_heterogeneity(problem, shards)


def heterogeneous_run(method, stepsize: StepsizeConfig, rounds: int = 500, seed: int = 3, threads: int = 1, data=None):
    problem, shards, report = data or heterogeneous_problem(seed)
    cfg = FederationConfig(method=method, tau=5, rounds=rounds, batch_size=20, master_seed=seed, stepsize=stepsize)
    return run(cfg, problem, shards, x_star=report.x_star, track_suboptimality=True, threads=threads)


def convergence_suite(seed: int = 0) -> list[Verdict]:
    out = []
    h = interpolation_run(rounds=300)
    out.append(verify_linear_rate(h, INTERPOLATION_MU, INTERPOLATION_ALPHA))
    data = heterogeneous_problem()
    tau = 5
    h = heterogeneous_run(Method.FEDSPS, StepsizeConfig(c=2 * tau**2, gamma_b=0.1), rounds=200, data=data)
    out.append(verify_neighborhood(h, data[2]))
    out.append(verify_consensus_bound(h))
    h = heterogeneous_run(Method.FEDDECSPS, StepsizeConfig(gamma_b=1.0, dec_schedule="theory"), rounds=200, data=data)
    out.append(verify_decsps_rate(h, data[2]))
    return out


def run_suite(name: str, seed: int = 0) -> list[Verdict]:
    if name == "all":
        return [v for s in SUITES for v in run_suite(s, seed)]
    if name == "stepsize":
        return stepsize_suite(seed=seed)
    if name == "heterogeneity":
        return heterogeneity_suite(seed=seed)
    if name == "equivalence":
        return equivalence_suite(seed)
    if name == "convergence":
        return convergence_suite(seed)
    raise KeyError(name)

