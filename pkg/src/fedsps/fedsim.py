"""Round-synchronous federated training: FedAvg, FedSPS, FedDecSPS and FedSPS-Global.

Clients run their local steps independently (optionally on a thread pool);
averaging always reduces client iterates in ascending client-id order, so a
run is bitwise reproducible for any thread count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from fedsps import rng as rngmod
from fedsps.errors import NumericalDivergence
from fedsps.metrics import History, RoundTrace
from fedsps.problems import Problem, client_loss
from fedsps.stepsize import (
    AggregationFormula,
    StepsizeConfig,
    StepsizeEngine,
    Variant,
    aggregate_global,
    sps_max,
)

DIVERGENCE_LOSS = 1e12


class Method(str, Enum):
    FEDAVG = "fedavg"
    FEDSPS = "fedsps"
    FEDDECSPS = "feddecsps"
    FEDSPS_GLOBAL = "fedsps_global"


_VARIANT = {
    Method.FEDAVG: Variant.CONSTANT,
    Method.FEDSPS: Variant.SPS_MAX,
    Method.FEDDECSPS: Variant.FEDDECSPS,
    Method.FEDSPS_GLOBAL: Variant.SPS_MAX,
}


@dataclass(frozen=True)
class FederationConfig:
    """``n_active = None`` means every client participates in every round.

    FedAvg uses ``stepsize.gamma_b`` as its constant stepsize. ``gamma0`` is
    FedSPS-Global's first-round stepsize; by default it is the local SPS_max
    value of the first sampled client at iteration 0.
    """

    method: Method = Method.FEDSPS
    tau: int = 5
    rounds: int = 500
    batch_size: int = 20
    n_active: int | None = None
    master_seed: int = 0
    eval_every: int = 1
    stepsize: StepsizeConfig = field(default_factory=StepsizeConfig)
    gamma0: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.tau < 1 or self.rounds < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("tau, rounds, batch_size and eval_every must be >= 1")
        if self.n_active is not None and self.n_active < 1:
            raise ValueError("n_active must be >= 1")

    @property
    def iterations(self) -> int:
        return self.rounds * self.tau

    def engine_config(self) -> StepsizeConfig:
        from dataclasses import replace

        return replace(self.stepsize.resolve(self.tau), variant=_VARIANT[self.method])


def sample_clients(round_index: int, fraction: float, seed: int, n_total: int) -> np.ndarray:
    """Uniform sample without replacement of max(1, round(fraction * n_total)) ids, sorted."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    k = max(1, int(round(fraction * n_total)))
    if k >= n_total:
        return np.arange(n_total)
    gen = rngmod.stream(seed, rngmod.SAMPLING, round_index)
    return np.sort(gen.choice(n_total, size=k, replace=False))


def draw_batch(gen: np.random.Generator, indices: np.ndarray, batch_size: int) -> np.ndarray:
    if batch_size >= len(indices):
        return indices
    return indices[gen.choice(len(indices), size=batch_size, replace=False)]


def client_stream(shard, master_seed: int) -> np.random.Generator:
    return np.random.default_rng([int(shard.rng_seed), int(master_seed)])


def local_step(x: np.ndarray, gamma: float, grad: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore", invalid="ignore"):
        x_new = x - gamma * grad
    if not np.isfinite(x_new).all():
        raise NumericalDivergence(f"non-finite parameters after a step with gamma={gamma!r}")
    return x_new


def communication_round(iterates) -> tuple[np.ndarray, float]:
    """Average client iterates (in the given order) and return the consensus
    distance R = mean_i ||x_i - avg||^2 measured just before averaging."""
    stack = np.stack(iterates)
    avg = stack.mean(axis=0)
    dev = stack - avg
    return avg, float(np.einsum("ij,ij->", dev, dev)) / len(stack)


@dataclass
class _ClientResult:
    x: np.ndarray
    gammas: list
    last_loss: float = 0.0
    last_gsq: float = 0.0
    last_grad: np.ndarray | None = None
    polyak_mass: float = 0.0
    subopt: float = 0.0


class _Simulation:
    def __init__(self, cfg, problem, shards, x0, x_star, track_suboptimality):
        self.cfg = cfg
        self.problem = problem
        self.shards = list(shards)
        self.n_total = len(self.shards)
        self.ecfg = cfg.engine_config()
        self.engines = [
            StepsizeEngine(self.ecfg, client_samples=s.size, batch_size=cfg.batch_size) for s in self.shards
        ]
        self.streams = [client_stream(s, cfg.master_seed) for s in self.shards]
        self.x = np.zeros(problem.dim) if x0 is None else np.array(x0, dtype=np.float64)
        self.x_star = None if x_star is None else np.asarray(x_star, dtype=np.float64)
        self.local_opt = None
        if track_suboptimality:
            if self.x_star is None:
                raise ValueError("suboptimality tracking needs x_star")
            self.local_opt = [problem.loss(self.x_star, s.indices) for s in self.shards]
        self.gamma_global = cfg.gamma0
        n_active = self.n_total if cfg.n_active is None else min(cfg.n_active, self.n_total)
        self.fraction = n_active / self.n_total

    def client_update(self, i, x_start, batches, t0, gamma_fixed):
        problem, engine, cfg = self.problem, self.engines[i], self.ecfg
        res = _ClientResult(x=x_start, gammas=[])
        x = x_start
        for k, batch in enumerate(batches):
            if self.local_opt is not None:
                res.subopt += problem.loss(x, self.shards[i].indices) - self.local_opt[i]
            loss, grad = problem.evaluate(x, batch)
            if not math.isfinite(loss) or loss > DIVERGENCE_LOSS:
                raise NumericalDivergence(f"client {i} loss {loss!r} at iteration {t0 + k}")
            gsq = float(grad @ grad)
            gamma = gamma_fixed if gamma_fixed is not None else engine(loss, gsq, t0 + k)
            res.gammas.append(gamma)
            res.polyak_mass += gamma * (loss - cfg.ell_star)
            res.last_loss, res.last_gsq, res.last_grad = loss, gsq, grad
            x = local_step(x, gamma, grad)
        res.x = x
        return res

    def evaluate(self, history, r, active, r_t, gammas):
        loss = client_loss(self.problem, self.x, self.shards)
        if not math.isfinite(loss) or loss > DIVERGENCE_LOSS:
            raise NumericalDivergence(f"global loss {loss!r} after round {r + 1}")
        gap = None if history.f_star is None else loss - history.f_star
        dist = None
        if self.x_star is not None:
            diff = self.x - self.x_star
            dist = float(diff @ diff)
        S = np.asarray(gammas)
        mean = float(S.mean())
        history.rounds.append(
            RoundTrace(
                round=r + 1,
                t=(r + 1) * self.cfg.tau,
                loss=loss,
                gap=gap,
                dist_sq=dist,
                r_t=r_t,
                ss_inter_mean=mean,
                ss_inter_std=float(S.std(axis=0).mean()),
                ss_intra_mean=mean,
                ss_intra_std=float(S.std(axis=1).mean()),
                active=tuple(int(a) for a in active),
            )
        )

    def run(self, threads, record_rounds):
        cfg = self.cfg
        history = History(method=cfg.method.value, tau=cfg.tau, stepsize=self.ecfg)
        if self.x_star is not None:
            history.f_star = client_loss(self.problem, self.x_star, self.shards)
            diff = self.x - self.x_star
            history.initial_dist_sq = float(diff @ diff)
            history.x_star_sq = float(self.x_star @ self.x_star)
        history.initial_loss = client_loss(self.problem, self.x, self.shards)
        pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
        subopt_total = 0.0
        subopt_count = 0
        try:
            for r in range(cfg.rounds):
                active = sample_clients(r, self.fraction, cfg.master_seed, self.n_total)
                batches = {
                    i: [draw_batch(self.streams[i], self.shards[i].indices, cfg.batch_size) for _ in range(cfg.tau)]
                    for i in active
                }
                t0 = r * cfg.tau
                gamma_fixed = None
                if cfg.method is Method.FEDSPS_GLOBAL:
                    if self.gamma_global is None:
                        first = active[0]
                        loss, grad = self.problem.evaluate(self.x, batches[first][0])
                        self.gamma_global = sps_max(loss, float(grad @ grad), self.ecfg)
                    gamma_fixed = self.gamma_global

                def work(i):
                    return self.client_update(i, self.x, batches[i], t0, gamma_fixed)

                if pool is None:
                    results = [work(i) for i in active]
                else:
                    results = list(pool.map(work, active))

                x_new, r_t = communication_round([res.x for res in results])
                history.r_t_all.append(r_t)
                mass = math.fsum(res.polyak_mass for res in results)
                history.r_bound_all.append(cfg.tau / (len(results) * self.ecfg.c) * mass)
                if self.local_opt is not None:
                    subopt_total += math.fsum(res.subopt for res in results)
                    subopt_count += len(results) * cfg.tau
                    history.suboptimality = subopt_total / subopt_count
                gammas = [res.gammas for res in results]
                if cfg.method is Method.FEDSPS_GLOBAL:
                    history.global_gammas.append(self.gamma_global)
                    self.gamma_global = aggregate_global(
                        [(res.last_loss, res.last_gsq) for res in results], self.ecfg, AggregationFormula.A
                    )
                if record_rounds:
                    history.log.append(
                        {
                            "active": [int(a) for a in active],
                            "gammas": gammas,
                            "last_stats": [(res.last_loss, res.last_gsq) for res in results],
                            "x_avg": x_new.copy(),
                        }
                    )
                self.x = x_new
                history.iterations = (r + 1) * cfg.tau
                if (r + 1) % cfg.eval_every == 0 or r + 1 == cfg.rounds:
                    self.evaluate(history, r, active, r_t, gammas)
        except NumericalDivergence as exc:
            history.diverged = True
            history.x_final = self.x
            exc.history = history
            raise
        finally:
            if pool is not None:
                pool.shutdown()
        history.x_final = self.x
        return history


def run(
    cfg: FederationConfig,
    problem: Problem,
    shards,
    x0=None,
    x_star=None,
    threads: int = 1,
    track_suboptimality: bool = False,
    record_rounds: bool = False,
) -> History:
    """Execute ``cfg.rounds * cfg.tau`` iterations and return the trace.

    ``x_star`` is used for metrics only (distance, gap and, with
    ``track_suboptimality``, the per-client averaged suboptimality
    (1/Tn) sum_t sum_i f_i(x_t^i) - f_i(x*)). It never influences training.
    """
    sim = _Simulation(cfg, problem, shards, x0, x_star, track_suboptimality)
    return sim.run(max(1, int(threads)), record_rounds)


def reference_run(cfg: FederationConfig, problem: Problem, shards, x0=None) -> list[np.ndarray]:
    """Plain triple loop over rounds, clients and local steps, without client
    sampling, threads or engine objects. Returns the averaged iterate after
    every round. Used as an equivalence oracle for :func:`run`."""
    from fedsps.stepsize import feddecsps, initial_state

    ecfg = cfg.engine_config()
    if cfg.n_active is not None and cfg.n_active < len(shards):
        raise ValueError("the reference loop does not sample clients")
    if cfg.method is Method.FEDSPS_GLOBAL or ecfg.cap_schedule.value != "fixed":
        raise ValueError("the reference loop covers FedAvg, FedSPS and FedDecSPS with a fixed cap")
    streams = [client_stream(s, cfg.master_seed) for s in shards]
    states = [initial_state(ecfg) for _ in shards]
    x = np.zeros(problem.dim) if x0 is None else np.array(x0, dtype=np.float64)
    out = []
    for r in range(cfg.rounds):
        batches = [[draw_batch(streams[i], s.indices, cfg.batch_size) for _ in range(cfg.tau)] for i, s in enumerate(shards)]
        finals = []
        for i in range(len(shards)):
            xi = x
            for k in range(cfg.tau):
                loss, g = problem.evaluate(xi, batches[i][k])
                gsq = float(g @ g)
                if cfg.method is Method.FEDAVG:
                    gamma = ecfg.gamma_b
                elif cfg.method is Method.FEDSPS:
                    gamma = sps_max(loss, gsq, ecfg)
                else:
                    gamma, states[i] = feddecsps(loss, gsq, ecfg, states[i], t=r * cfg.tau + k)
                xi = xi - gamma * g
            finals.append(xi)
        x = np.stack(finals).mean(axis=0)
        out.append(x)
    return out
