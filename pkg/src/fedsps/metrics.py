"""Round traces, theorem-derived bound checks and CSV/JSON emission."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from fedsps.errors import CheckSkipped

CSV_COLUMNS = (
    "round",
    "t",
    "loss",
    "gap",
    "dist_sq",
    "r_t",
    "ss_inter_mean",
    "ss_inter_std",
    "ss_intra_mean",
    "ss_intra_std",
)
# Bounds hold in expectation; a single seeded run is allowed this much slack.
BOUND_SLACK = 1.05
DISTANCE_FLOOR = 1e-28
# rounding floor of ||x - x*||^2 relative to ||x*||^2
RELATIVE_FLOOR = (1e3 * np.finfo(float).eps) ** 2


@dataclass(frozen=True)
class RoundTrace:
    round: int
    t: int
    loss: float
    gap: float | None
    dist_sq: float | None
    r_t: float
    ss_inter_mean: float
    ss_inter_std: float
    ss_intra_mean: float
    ss_intra_std: float
    active: tuple = ()

    def row(self) -> dict:
        return {name: getattr(self, name) for name in CSV_COLUMNS}


@dataclass
class History:
    """Everything a run records. ``rounds`` holds the emitted traces; the
    ``*_all`` lists have one entry per communication round."""

    method: str = ""
    tau: int = 1
    stepsize: object = None
    rounds: list = field(default_factory=list)
    f_star: float | None = None
    initial_loss: float | None = None
    initial_dist_sq: float | None = None
    x_star_sq: float | None = None
    r_t_all: list = field(default_factory=list)
    r_bound_all: list = field(default_factory=list)
    suboptimality: float | None = None
    global_gammas: list = field(default_factory=list)
    log: list = field(default_factory=list)
    iterations: int = 0
    x_final: np.ndarray | None = None
    diverged: bool = False

    def column(self, name) -> np.ndarray:
        return np.array([getattr(tr, name) for tr in self.rounds], dtype=float)


@dataclass(frozen=True)
class Verdict:
    name: str
    passed: bool
    observed: float
    bound: float
    tolerance: float
    details: dict = field(default_factory=dict)


def upper_bound_verdict(name, observed, bound, slack=BOUND_SLACK, **details) -> Verdict:
    return Verdict(name, bool(observed <= bound * slack), float(observed), float(bound), slack - 1.0, details)


def plateau(history: History, fraction: float = 0.1) -> float:
    """Mean optimality gap over the last ``fraction`` of emitted rounds."""
    gaps = history.column("gap")
    if not len(gaps) or np.isnan(gaps).any():
        raise CheckSkipped("plateau needs the optimality gap (f* unknown)")
    k = max(1, int(math.ceil(fraction * len(gaps))))
    return float(gaps[-k:].mean())


def _theory_inputs(history: History, report, sigma_f_sq):
    if history.suboptimality is None or history.initial_dist_sq is None:
        raise CheckSkipped("run has no x* (suboptimality was not tracked)")
    sigma = report.sigma_f_sq if sigma_f_sq is None else sigma_f_sq
    return history.stepsize, history.iterations, history.initial_dist_sq, sigma, report.smoothness_L


def neighborhood_bound(c, gamma_b, L, T, r0_sq, sigma_f_sq) -> float:
    alpha = min(1.0 / (2.0 * c * L), gamma_b)
    return 2.0 / (T * alpha) * r0_sq + 4.0 * gamma_b * sigma_f_sq / alpha


def verify_neighborhood(history: History, report, sigma_f_sq=None, require_theory=True) -> Verdict:
    """Averaged per-client suboptimality against the convex FedSPS neighborhood bound."""
    cfg, T, r0, sigma, L = _theory_inputs(history, report, sigma_f_sq)
    if require_theory and cfg.c < 2 * history.tau**2:
        raise CheckSkipped(f"bound assumes c >= 2 tau^2 = {2 * history.tau**2}, run used c = {cfg.c}")
    bound = neighborhood_bound(cfg.c, cfg.gamma_b, L, T, r0, sigma)
    return upper_bound_verdict("fedsps_neighborhood", history.suboptimality, bound, T=T, sigma_f_sq=sigma)


def decsps_bound(c0, gamma_b, L, tau, T, r0_sq, sigma_f_sq) -> float:
    c_last = c0 * math.sqrt(T)
    alpha0 = min(1.0 / (2.0 * c0 * L), gamma_b)
    inv_sq_sum = math.fsum(1.0 / (c0 * c0 * (t + 1)) for t in range(T))
    return (
        2.0 * c_last / (T * c0 * alpha0) * r0_sq
        + 2.0 * c_last * gamma_b * (2.0 + tau**2) / alpha0 * sigma_f_sq * inv_sq_sum / T
    )


def verify_decsps_rate(history: History, report, sigma_f_sq=None, require_theory=True) -> Verdict:
    """Averaged suboptimality against the decreasing-SPS bound with its explicit constants."""
    cfg, T, r0, sigma, L = _theory_inputs(history, report, sigma_f_sq)
    if require_theory and cfg.c0 < 2 * history.tau**2:
        raise CheckSkipped(f"bound assumes c_t >= 2 tau^2, run used c0 = {cfg.c0}")
    bound = decsps_bound(cfg.c0, cfg.gamma_b, L, history.tau, T, r0, sigma)
    return upper_bound_verdict("decsps_rate", history.suboptimality, bound, T=T, sigma_f_sq=sigma)


def log_linear_fit(ts, values):
    """Least-squares fit of log(values) against ts: (slope, intercept, r^2)."""
    res = stats.linregress(np.asarray(ts, dtype=float), np.log(np.asarray(values, dtype=float)))
    return float(res.slope), float(res.intercept), float(res.rvalue**2)


def distance_series(history: History):
    ts = [0] + [tr.t for tr in history.rounds]
    ds = [history.initial_dist_sq] + [tr.dist_sq for tr in history.rounds]
    if any(d is None for d in ds):
        raise CheckSkipped("distance to x* was not recorded")
    return np.array(ts, dtype=float), np.array(ds, dtype=float)


def distance_floor(history: History) -> float:
    return max(DISTANCE_FLOOR, RELATIVE_FLOOR * (history.x_star_sq or 0.0))


def converging_window(history: History):
    """(t, distance) points with t in [0.1T, 0.9T], truncated where the
    distance first reaches the numerical floor."""
    ts, ds = distance_series(history)
    T = history.iterations
    below = np.flatnonzero(ds <= distance_floor(history))
    end = below[0] if len(below) else len(ds)
    keep = (ts >= 0.1 * T) & (ts <= 0.9 * T) & (np.arange(len(ds)) < end)
    return ts[keep], ds[keep]


def verify_linear_rate(history: History, mu: float, alpha: float, tolerance: float = 1e-3) -> Verdict:
    """Empirical per-iteration contraction factor from a log-linear fit over
    the converging window, against 1 - mu*alpha."""
    rate = 1.0 - mu * alpha
    if history.diverged:
        return Verdict("linear_rate", False, math.inf, rate, tolerance, {"diverged": True})
    ts, ds = distance_series(history)
    T = history.iterations
    final = ds[-1]
    floor = distance_floor(history)
    final_bound = (1.0 / (mu * alpha)) * rate**T * ds[0]
    wt, wd = converging_window(history)
    if len(wt) < 2:
        # converged to the floor before the window opened
        passed = final <= max(final_bound * BOUND_SLACK, floor)
        return Verdict("linear_rate", bool(passed), 0.0, rate, tolerance, {"final": final, "fit": "degenerate"})
    slope, _, r2 = log_linear_fit(wt, wd)
    factor = math.exp(slope)
    passed = factor <= rate + tolerance and final <= max(final_bound * BOUND_SLACK, floor)
    return Verdict(
        "linear_rate", bool(passed), factor, rate, tolerance, {"r2": r2, "final": final, "final_bound": final_bound}
    )


def verify_consensus_bound(history: History) -> Verdict:
    """Every pre-averaging consensus distance against the logged Polyak mass bound."""
    worst, worst_bound = 0.0, 0.0
    ok = True
    for r, b in zip(history.r_t_all, history.r_bound_all):
        if r > b * (1 + 1e-9) + 1e-300:
            ok = False
        if r - b > worst - worst_bound:
            worst, worst_bound = r, b
    return Verdict("consensus_bound", ok, worst, worst_bound, 1e-9, {"rounds": len(history.r_t_all)})


def seed_mean(fn, seeds) -> float:
    """Mean of ``fn(seed)`` over seeds, the multi-seed mode of the bound checks."""
    return math.fsum(fn(s) for s in seeds) / len(seeds)


# -- emission ----------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return format(float(v), ".17g")


def traces_to_csv(traces) -> str:
    buf = io.StringIO()
    buf.write(",".join(CSV_COLUMNS) + "\n")
    for tr in traces:
        buf.write(",".join(_fmt(getattr(tr, c)) for c in CSV_COLUMNS) + "\n")
    return buf.getvalue()


def _json_value(v) -> str:
    if v is None:
        return "null"
    s = _fmt(v)
    if s in ("nan", "inf", "-inf"):
        raise ValueError(f"cannot serialize {v!r} as JSON")
    return s


def traces_to_json(traces) -> str:
    rows = []
    for tr in traces:
        body = ", ".join(f'"{c}": {_json_value(getattr(tr, c))}' for c in CSV_COLUMNS)
        rows.append("  {" + body + "}")
    return "[\n" + ",\n".join(rows) + "\n]\n" if rows else "[]\n"


def emit(traces, fmt: str, path) -> None:
    fmt = fmt.lower()
    if fmt == "csv":
        text = traces_to_csv(traces)
    elif fmt == "json":
        text = traces_to_json(traces)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _parse_field(name, text):
    if text == "" or text is None:
        return None
    return int(text) if name in ("round", "t") else float(text)


def read_trace(path, fmt: str) -> list[dict]:
    """Parse an emitted trace back into dicts keyed by column name."""
    with open(path, encoding="utf-8", newline="") as fh:
        if fmt.lower() == "csv":
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
                raise ValueError(f"unexpected CSV header {reader.fieldnames}")
            return [{k: _parse_field(k, row[k]) for k in CSV_COLUMNS} for row in reader]
        return [{k: _parse_field(k, row[k]) for k in CSV_COLUMNS} for row in json.load(fh)]


def format_verdicts(verdicts) -> str:
    lines = [f"{'check':<32} {'result':<6} {'observed':>14} {'bound':>14}"]
    for v in verdicts:
        lines.append(f"{v.name:<32} {'PASS' if v.passed else 'FAIL':<6} {v.observed:>14.6g} {v.bound:>14.6g}")
    return "\n".join(lines)


def verdicts_json(verdicts) -> str:
    return json.dumps(
        [
            {
                "name": v.name,
                "passed": v.passed,
                "observed": v.observed,
                "bound": v.bound,
                "tolerance": v.tolerance,
                "details": {k: (float(x) if isinstance(x, (float, np.floating)) else x) for k, x in v.details.items()},
            }
            for v in verdicts
        ],
        indent=2,
    )
