"""Stepsize rules: constant, SPS_max, decreasing SPS, smoothed caps and
server-side aggregation of local Polyak stepsizes.

All functions are pure; :class:`StepsizeEngine` wraps them with the small
amount of per-client state the decreasing and smoothed rules need.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from fedsps.errors import DegenerateGradient, LowerBoundViolated

# Below this, a squared gradient norm (or loss gap) is treated as zero.
ZERO_GUARD = 1e-30
CHECK_RTOL = 1e-9


class Variant(str, Enum):
    CONSTANT = "constant"
    SPS_MAX = "sps_max"
    FEDDECSPS = "feddecsps"


class CapSchedule(str, Enum):
    FIXED = "fixed"
    SMOOTHED = "smoothed"


class DecSchedule(str, Enum):
    # c_t = c0 * sqrt(t + 1) with the configured c0
    EMPIRICAL = "empirical"
    # c_t = 2 tau^2 * sqrt(t + 1)
    THEORY = "theory"


class AggregationFormula(str, Enum):
    A = "A"
    B = "B"
    C = "C"


@dataclass(frozen=True)
class StepsizeConfig:
    variant: Variant = Variant.SPS_MAX
    c: float = 0.5
    gamma_b: float = 1.0
    ell_star: float = 0.0
    c0: float = 0.5
    cap_schedule: CapSchedule = CapSchedule.FIXED
    dec_schedule: DecSchedule = DecSchedule.EMPIRICAL

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "cap_schedule", CapSchedule(self.cap_schedule))
        object.__setattr__(self, "dec_schedule", DecSchedule(self.dec_schedule))
        for name in ("c", "gamma_b", "c0"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be positive and finite, got {value!r}")
        if not math.isfinite(self.ell_star):
            raise ValueError("ell_star must be finite")

    def resolve(self, tau: int) -> StepsizeConfig:
        """Fix c0 for the theory schedule, which depends on the local step count."""
        if self.dec_schedule is DecSchedule.THEORY:
            return replace(self, c0=2.0 * tau**2)
        return self


@dataclass(frozen=True)
class StepsizeState:
    t: int
    prev_gamma: float
    prev_ct: float
    current_cap: float


def initial_state(cfg: StepsizeConfig) -> StepsizeState:
    # c_{-1} = c_0 and gamma_{-1} = gamma_b
    return StepsizeState(t=0, prev_gamma=cfg.gamma_b, prev_ct=cfg.c0, current_cap=cfg.gamma_b)


def polyak_ratio(loss: float, grad_sq_norm: float, ell_star: float = 0.0) -> float:
    """(loss - ell_star) / ||g||^2, returning +inf at an exact sample minimizer."""
    if not (math.isfinite(loss) and math.isfinite(grad_sq_norm)):
        raise ValueError(f"non-finite stepsize inputs: loss={loss!r}, grad_sq_norm={grad_sq_norm!r}")
    if loss < ell_star:
        raise LowerBoundViolated(f"loss {loss!r} below lower bound {ell_star!r}")
    if grad_sq_norm < 0:
        raise ValueError(f"negative squared gradient norm {grad_sq_norm!r}")
    gap = loss - ell_star
    if grad_sq_norm < ZERO_GUARD:
        if gap < ZERO_GUARD:
            return math.inf
        # underflow-level gradients with an equally tiny gap occur near an
        # interpolating solution; only an exactly zero gradient is inconsistent
        if grad_sq_norm == 0.0:
            raise DegenerateGradient(f"zero gradient with loss gap {gap!r}")
    return gap / grad_sq_norm


def sps_max(loss: float, grad_sq_norm: float, cfg: StepsizeConfig, cap: float | None = None) -> float:
    """min{(loss - ell*) / (c ||g||^2), cap}; ``cap`` defaults to ``cfg.gamma_b``."""
    cap = cfg.gamma_b if cap is None else cap
    ratio = polyak_ratio(loss, grad_sq_norm, cfg.ell_star)
    if math.isinf(ratio):
        return cap
    return min(ratio / cfg.c, cap)


def decsps_ct(c0: float, t: int) -> float:
    return c0 * math.sqrt(t + 1)


def feddecsps(
    loss: float,
    grad_sq_norm: float,
    cfg: StepsizeConfig,
    state: StepsizeState,
    t: int | None = None,
) -> tuple[float, StepsizeState]:
    """One decreasing-SPS step.

    ``t`` is the global iteration counter used in c_t; it defaults to
    ``state.t``. Returns the stepsize and the successor state.
    """
    t = state.t if t is None else t
    c_t = decsps_ct(cfg.c0, t)
    ratio = polyak_ratio(loss, grad_sq_norm, cfg.ell_star)
    # (c_{t-1}/c_t) <= 1 is rounded first so the product never exceeds prev_gamma
    carried = (state.prev_ct / c_t) * state.prev_gamma
    gamma = carried if math.isinf(ratio) else min(ratio / c_t, carried)
    return gamma, replace(state, t=t + 1, prev_gamma=gamma, prev_ct=c_t)


def smoothed_cap(cap: float, batch_size: int, client_samples: int) -> float:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if client_samples < batch_size:
        raise ValueError(f"client_samples ({client_samples}) must be >= batch_size ({batch_size})")
    return cap * 2.0 ** (batch_size / client_samples)


def aggregate_global(
    stats,
    cfg: StepsizeConfig,
    formula: AggregationFormula | str = AggregationFormula.A,
    grads=None,
) -> float:
    """Aggregate per-client (loss, ||g||^2) pairs into one shared stepsize.

    A: mean of the local SPS_max values.
    B: SPS_max of the mean loss gap over the mean squared gradient norm.
    C: SPS_max of the mean loss gap over the squared norm of the mean gradient;
       needs the raw gradient vectors in ``grads``.
    """
    formula = AggregationFormula(formula)
    stats = [(float(loss), float(gsq)) for loss, gsq in stats]
    if not stats:
        raise ValueError("aggregate_global needs at least one client")
    for loss, gsq in stats:
        polyak_ratio(loss, gsq, cfg.ell_star)

    if formula is AggregationFormula.A:
        return math.fsum(sps_max(loss, gsq, cfg) for loss, gsq in stats) / len(stats)

    mean_gap = math.fsum(loss - cfg.ell_star for loss, _ in stats) / len(stats)
    if formula is AggregationFormula.B:
        denom = math.fsum(gsq for _, gsq in stats) / len(stats)
    else:
        if grads is None or len(grads) != len(stats):
            raise ValueError("formula C needs one gradient vector per client")
        mean_grad = np.mean(np.asarray(grads, dtype=float), axis=0)
        denom = float(mean_grad @ mean_grad)
    if denom < ZERO_GUARD:
        # client gradients cancel (or all samples are minimized): ratio is unbounded
        return cfg.gamma_b
    return min(mean_gap / (cfg.c * denom), cfg.gamma_b)


def fundamental_inequality_check(
    gamma: float, loss: float, grad_sq_norm: float, cfg: StepsizeConfig, c: float | None = None
) -> bool:
    """||gamma g||^2 <= (gamma / c) (loss - ell*), up to CHECK_RTOL.

    Pass ``c=c_t`` to check a decreasing-SPS stepsize.
    """
    c = cfg.c if c is None else c
    lhs = gamma * gamma * grad_sq_norm
    rhs = (gamma / c) * (loss - cfg.ell_star)
    return lhs <= rhs + CHECK_RTOL * abs(rhs)


def sps_bounds(cfg: StepsizeConfig, L: float) -> tuple[float, float]:
    """Interval [min{1/(2cL), gamma_b}, gamma_b] holding every SPS_max stepsize."""
    return min(1.0 / (2.0 * cfg.c * L), cfg.gamma_b), cfg.gamma_b


def decsps_bounds(cfg: StepsizeConfig, t: int, L: float) -> tuple[float, float]:
    c_t = decsps_ct(cfg.c0, t)
    upper = cfg.c0 * cfg.gamma_b / c_t
    return min(1.0 / (2.0 * c_t * L), upper), upper


class StepsizeEngine:
    """Per-client stepsize state machine.

    ``client_samples`` and ``batch_size`` are only needed for the smoothed
    cap schedule.
    """

    def __init__(self, cfg: StepsizeConfig, client_samples: int | None = None, batch_size: int | None = None):
        self.cfg = cfg
        self.state = initial_state(cfg)
        if cfg.cap_schedule is CapSchedule.SMOOTHED:
            if client_samples is None or batch_size is None:
                raise ValueError("smoothed cap schedule needs client_samples and batch_size")
            # a client smaller than one batch draws its whole shard each step
            self._growth = (min(batch_size, client_samples), client_samples)
        else:
            self._growth = None

    def __call__(self, loss: float, grad_sq_norm: float, t: int) -> float:
        cfg = self.cfg
        if cfg.variant is Variant.CONSTANT:
            gamma = cfg.gamma_b
            self.state = replace(self.state, t=t + 1, prev_gamma=gamma)
        elif cfg.variant is Variant.SPS_MAX:
            cap = self.state.current_cap
            gamma = sps_max(loss, grad_sq_norm, cfg, cap=cap)
            if self._growth is not None:
                cap = smoothed_cap(cap, *self._growth)
            self.state = replace(self.state, t=t + 1, prev_gamma=gamma, current_cap=cap)
        else:
            gamma, self.state = feddecsps(loss, grad_sq_norm, cfg, self.state, t=t)
        return gamma

    @property
    def needs_loss(self) -> bool:
        return self.cfg.variant is not Variant.CONSTANT
