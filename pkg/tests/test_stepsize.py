import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsps.errors import DegenerateGradient, LowerBoundViolated
from fedsps.stepsize import (
    AggregationFormula,
    StepsizeConfig,
    StepsizeEngine,
    Variant,
    aggregate_global,
    decsps_bounds,
    decsps_ct,
    feddecsps,
    fundamental_inequality_check,
    initial_state,
    polyak_ratio,
    smoothed_cap,
    sps_bounds,
    sps_max,
)

positive = st.floats(min_value=1e-6, max_value=1e6, allow_nan=False, allow_infinity=False)


def test_sps_max_hand_value():
    cfg = StepsizeConfig(c=0.5, gamma_b=10.0)
    assert sps_max(2.0, 4.0, cfg) == 1.0


def test_sps_max_at_exact_minimizer_returns_cap():
    for c in (0.1, 0.5, 7.0):
        assert sps_max(0.0, 0.0, StepsizeConfig(c=c, gamma_b=1.0)) == 1.0


def test_sps_max_cap_active():
    assert sps_max(1000.0, 1.0, StepsizeConfig(c=0.5, gamma_b=1.0)) == 1.0


def test_sps_max_on_1d_quadratic_stays_in_stepsize_bounds():
    L = 3.0
    cfg = StepsizeConfig(c=0.5, gamma_b=5.0)
    lo, hi = sps_bounds(cfg, L)
    assert lo == pytest.approx(1 / (2 * 0.5 * L))
    for x in np.linspace(-10, 10, 201):
        if x == 0:
            continue
        gamma = sps_max(0.5 * L * x * x, (L * x) ** 2, cfg)
        assert lo * (1 - 1e-12) <= gamma <= hi


def test_lower_bound_violation_raises():
    with pytest.raises(LowerBoundViolated):
        sps_max(-0.1, 1.0, StepsizeConfig())
    with pytest.raises(LowerBoundViolated):
        sps_max(0.5, 1.0, StepsizeConfig(ell_star=1.0))


def test_zero_gradient_with_positive_gap_is_degenerate():
    with pytest.raises(DegenerateGradient):
        polyak_ratio(1.0, 0.0)


def test_underflow_level_gradient_is_not_degenerate():
    # both quantities tiny, as seen next to an interpolating solution
    assert polyak_ratio(2.2e-30, 8.9e-31) == pytest.approx(2.2 / 0.89)


def test_non_finite_inputs_rejected():
    with pytest.raises(ValueError):
        polyak_ratio(math.nan, 1.0)
    with pytest.raises(ValueError):
        polyak_ratio(1.0, math.inf)


def test_config_validation():
    for bad in (dict(c=0), dict(gamma_b=-1), dict(c0=math.inf)):
        with pytest.raises(ValueError):
            StepsizeConfig(**bad)


def test_feddecsps_hand_value():
    cfg = StepsizeConfig(variant=Variant.FEDDECSPS, c0=0.5, gamma_b=10.0)
    gamma, state = feddecsps(2.0, 4.0, cfg, initial_state(cfg))
    assert gamma == 1.0
    assert state.t == 1 and state.prev_ct == 0.5


def test_theory_schedule_resolves_c0():
    cfg = StepsizeConfig(dec_schedule="theory").resolve(tau=5)
    assert cfg.c0 == 50.0
    assert decsps_ct(cfg.c0, 3) == 100.0


@settings(max_examples=200, deadline=None)
@given(
    seq=st.lists(st.tuples(positive, positive), min_size=2, max_size=30),
    c0=st.floats(0.05, 100),
    gamma_b=st.floats(1e-3, 100),
)
def test_feddecsps_non_increasing(seq, c0, gamma_b):
    cfg = StepsizeConfig(variant=Variant.FEDDECSPS, c0=c0, gamma_b=gamma_b)
    state = initial_state(cfg)
    prev = math.inf
    for gap, gsq in seq:
        gamma, state = feddecsps(gap, gsq, cfg, state)
        assert gamma <= prev
        prev = gamma


def test_feddecsps_random_sequences_monotone():
    gen = np.random.default_rng(0)
    cfg = StepsizeConfig(variant=Variant.FEDDECSPS, c0=0.5, gamma_b=2.0)
    for _ in range(10_000):
        state = initial_state(cfg)
        prev = math.inf
        for gap, gsq in np.exp(gen.uniform(-5, 5, (5, 2))):
            gamma, state = feddecsps(float(gap), float(gsq), cfg, state)
            assert gamma <= prev
            prev = gamma


def test_feddecsps_bounds_on_quadratic():
    L = 4.0
    cfg = StepsizeConfig(variant=Variant.FEDDECSPS, c0=2.0, gamma_b=0.5)
    state = initial_state(cfg)
    gen = np.random.default_rng(1)
    for t in range(500):
        x = gen.normal() * 10
        gamma, state = feddecsps(0.5 * L * x * x, (L * x) ** 2, cfg, state, t=t)
        lo, hi = decsps_bounds(cfg, t, L)
        assert lo * (1 - 1e-12) <= gamma <= hi * (1 + 1e-12)


def test_single_client_aggregation_equals_local_sps():
    cfg = StepsizeConfig(c=0.5, gamma_b=3.0)
    stats = [(1.3, 0.7)]
    expected = sps_max(1.3, 0.7, cfg)
    for f in AggregationFormula:
        grads = [np.array([math.sqrt(0.7), 0.0])] if f is AggregationFormula.C else None
        assert aggregate_global(stats, cfg, f, grads=grads) == pytest.approx(expected, rel=1e-15)


def test_identical_clients_all_formulas_agree():
    cfg = StepsizeConfig(c=0.5, gamma_b=10.0)
    g = np.array([1.0, 2.0])
    stats = [(2.0, 5.0), (2.0, 5.0)]
    values = [aggregate_global(stats, cfg, f, grads=[g, g]) for f in AggregationFormula]
    assert values[0] == pytest.approx(values[1]) == pytest.approx(values[2]) == pytest.approx(sps_max(2.0, 5.0, cfg))


def test_formula_b_can_exceed_formula_a():
    # the mean of ratios is not an upper bound for the ratio of means
    cfg = StepsizeConfig(c=1.0, gamma_b=100.0)
    stats = [(1.0, 1.0), (100.0, 10.0)]
    a = aggregate_global(stats, cfg, "A")
    b = aggregate_global(stats, cfg, "B")
    assert a == pytest.approx(5.5)
    assert b == pytest.approx(101 / 11)
    assert b > a


def test_formula_b_can_exceed_formula_a_on_smooth_clients():
    # f_i = L_i x^2 / 2 with L = (1, 10) at x = (10, 0.1)
    cfg = StepsizeConfig(c=0.5, gamma_b=100.0)
    stats = [(0.5 * L * x * x, (L * x) ** 2) for L, x in ((1.0, 10.0), (10.0, 0.1))]
    assert aggregate_global(stats, cfg, "A") == pytest.approx(0.55)
    assert aggregate_global(stats, cfg, "B") > aggregate_global(stats, cfg, "A")


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(positive, st.lists(st.floats(-100, 100), min_size=3, max_size=3)), min_size=1, max_size=10))
def test_formula_b_never_exceeds_formula_c(clients):
    cfg = StepsizeConfig(c=0.5, gamma_b=1e6)
    grads = [np.array(g) for _, g in clients]
    stats = [(gap, float(g @ g)) for (gap, _), g in zip(clients, grads)]
    if any(s == 0 for _, s in stats):
        return
    b = aggregate_global(stats, cfg, "B")
    c = aggregate_global(stats, cfg, "C", grads=grads)
    assert b <= c * (1 + 1e-12)


def test_formula_c_needs_gradients():
    with pytest.raises(ValueError):
        aggregate_global([(1.0, 1.0)], StepsizeConfig(), "C")


def test_smoothed_cap_examples():
    assert smoothed_cap(1.0, 20, 20) == 2.0
    assert smoothed_cap(1.0, 1, 100) == pytest.approx(1.0069555500567189)
    with pytest.raises(ValueError):
        smoothed_cap(1.0, 5, 4)


def test_smoothed_cap_engine_increasing_and_respected():
    cfg = StepsizeConfig(c=0.5, gamma_b=0.01, cap_schedule="smoothed")
    engine = StepsizeEngine(cfg, client_samples=50, batch_size=5)
    gen = np.random.default_rng(2)
    cap = engine.state.current_cap
    for t in range(200):
        gamma = engine(float(gen.uniform(0.1, 10)), float(gen.uniform(0.01, 1)), t)
        assert gamma <= cap
        assert engine.state.current_cap > cap
        cap = engine.state.current_cap


def test_fundamental_inequality_examples():
    cfg = StepsizeConfig(c=0.5, gamma_b=10.0)
    assert fundamental_inequality_check(sps_max(2.0, 4.0, cfg), 2.0, 4.0, cfg)
    # cap-active inputs: gamma_b = 1 is below the Polyak value 500
    capped = StepsizeConfig(c=0.5, gamma_b=1.0)
    gamma = sps_max(1000.0, 1.0, capped)
    assert fundamental_inequality_check(gamma, 1000.0, 1.0, capped)
    # doubling a Polyak-active stepsize breaks it
    assert not fundamental_inequality_check(2 * 1.0, 2.0, 4.0, cfg)


@settings(max_examples=500, deadline=None)
@given(gap=positive, gsq=positive, c=st.floats(0.01, 100), gamma_b=st.floats(1e-4, 1e4))
def test_fundamental_inequality_always_holds(gap, gsq, c, gamma_b):
    cfg = StepsizeConfig(c=c, gamma_b=gamma_b)
    assert fundamental_inequality_check(sps_max(gap, gsq, cfg), gap, gsq, cfg)


def test_constant_engine_returns_cap():
    engine = StepsizeEngine(StepsizeConfig(variant="constant", gamma_b=0.3))
    assert not engine.needs_loss
    assert all(engine(5.0, 1.0, t) == 0.3 for t in range(10))
