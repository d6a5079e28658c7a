"""Command-line front end: ``fedsps run | grid | verify | partition``.

Experiments are described by a YAML document::

    seed: 0
    problem:
      kind: least_squares        # least_squares | logistic | softmax
      dataset: null              # LIBSVM file; omit to use `synth`
      synth: {samples: 200, features: 20, noise: 0.0}
      optimum: auto              # auto | true | false  (x* for gap/dist_sq)
    partition: {mode: contiguous, n_total: 10}
    federation: {method: fedsps, tau: 5, rounds: 500, batch_size: 20}
    stepsize: {c: 0.5, gamma_b: 1.0}
    output: {dir: out, format: csv}

Unknown keys are rejected. Exit codes: 0 success, 1 verification failure,
2 usage or configuration error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from fedsps import __version__
from fedsps import data as datamod
from fedsps import rng as rngmod
from fedsps.errors import FedSpsError, NumericalDivergence, OptimumNotFound
from fedsps.fedsim import FederationConfig, Method, run
from fedsps.metrics import emit, format_verdicts, verdicts_json
from fedsps.problems import client_loss, make_problem, solve_optimum
from fedsps.stepsize import CapSchedule, DecSchedule, StepsizeConfig

log = logging.getLogger("fedsps")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3
DEFAULT_GRID = (1e-4, 1e-3, 1e-2, 0.1, 1.0)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SynthSpec(_Section):
    samples: int = Field(200, ge=1)
    features: int = Field(20, ge=1)
    classes: int = Field(2, ge=2)
    noise: float = Field(0.0, ge=0)
    heterogeneity: float = Field(0.0, ge=0)
    scale: float = Field(1.0, gt=0)
    design: Literal["gaussian", "orthogonal"] = "gaussian"
    signal: float = Field(1.0, ge=0)
    curvature_spread: float = Field(1.0, ge=1)


class ProblemSpec(_Section):
    kind: Literal["least_squares", "logistic", "softmax"] = "least_squares"
    dataset: Optional[str] = None
    synth: SynthSpec = SynthSpec()
    optimum: Literal["auto", "true", "false"] = "auto"

    @model_validator(mode="before")
    @classmethod
    def _bool_optimum(cls, values):
        if isinstance(values, dict) and isinstance(values.get("optimum"), bool):
            values = {**values, "optimum": str(values["optimum"]).lower()}
        return values


class PartitionSpec(_Section):
    # contiguous: the generator's own client split (synthetic regression only)
    mode: Literal["iid", "noniid2class", "contiguous"] = "iid"
    n_total: int = Field(10, ge=1)
    seed: Optional[int] = None
    index_file: Optional[str] = None


class FederationSpec(_Section):
    method: Method = Method.FEDSPS
    tau: int = Field(5, ge=1)
    rounds: int = Field(500, ge=1)
    batch_size: int = Field(20, ge=1)
    n_active: Optional[int] = Field(None, ge=1)
    eval_every: int = Field(1, ge=1)
    gamma0: Optional[float] = Field(None, gt=0)


class StepsizeSpec(_Section):
    c: float = Field(0.5, gt=0)
    gamma_b: float = Field(1.0, gt=0)
    ell_star: float = 0.0
    c0: float = Field(0.5, gt=0)
    cap_schedule: CapSchedule = CapSchedule.FIXED
    dec_schedule: DecSchedule = DecSchedule.EMPIRICAL


class OutputSpec(_Section):
    dir: str = "out"
    format: Literal["csv", "json"] = "csv"


class ExperimentConfig(_Section):
    seed: int = 0
    problem: ProblemSpec = ProblemSpec()
    partition: PartitionSpec = PartitionSpec()
    federation: FederationSpec = FederationSpec()
    stepsize: StepsizeSpec = StepsizeSpec()
    output: OutputSpec = OutputSpec()

    def canonical(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def federation_config(self) -> FederationConfig:
        f = self.federation
        return FederationConfig(
            method=f.method,
            tau=f.tau,
            rounds=f.rounds,
            batch_size=f.batch_size,
            n_active=f.n_active,
            master_seed=self.seed,
            eval_every=f.eval_every,
            gamma0=f.gamma0,
            stepsize=StepsizeConfig(**self.stepsize.model_dump()),
        )


class UsageError(Exception):
    """Bad command line, configuration or input file: exit code 2."""


def load_config(path, seed=None, fmt=None, out=None) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
    except yaml.YAMLError as exc:
        raise UsageError(f"config {path} is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"config {path} must be a mapping at the top level")
    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        lines = [f"  {'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in exc.errors()]
        raise UsageError("invalid config:\n" + "\n".join(lines)) from exc
    updates = {}
    if seed is not None:
        updates["seed"] = seed
    if fmt is not None or out is not None:
        updates["output"] = cfg.output.model_copy(
            update={k: v for k, v in (("format", fmt), ("dir", out)) if v is not None}
        )
    return cfg.model_copy(update=updates)


def build_experiment(cfg: ExperimentConfig):
    """Materialize (problem, shards, dataset) from a validated config."""
    p, part = cfg.problem, cfg.partition
    part_seed = cfg.seed if part.seed is None else part.seed
    synth = p.synth
    shards = None
    if p.dataset is not None:
        try:
            dataset = datamod.load_libsvm(p.dataset)
        except OSError as exc:
            raise UsageError(f"cannot read dataset {p.dataset}: {exc.strerror or exc}") from exc
    elif p.kind == "least_squares":
        dataset, shards = datamod.synth_regression(
            synth.samples,
            synth.features,
            part.n_total,
            noise=synth.noise,
            heterogeneity=synth.heterogeneity,
            seed=cfg.seed,
            scale=synth.scale,
            design=synth.design,
            signal=synth.signal,
            curvature_spread=synth.curvature_spread,
        )
    else:
        classes = 2 if p.kind == "logistic" else synth.classes
        dataset = datamod.synth_classification(synth.samples, synth.features, classes, seed=cfg.seed)

    if part.index_file is not None:
        try:
            lists = json.loads(Path(part.index_file).read_text(encoding="utf-8"))["shards"]
        except (OSError, KeyError, ValueError) as exc:
            raise UsageError(f"cannot read partition file {part.index_file}: {exc}") from exc
        shards = datamod.shards_from_index_lists([np.asarray(s, dtype=np.int64) for s in lists], part_seed)
    elif part.mode == "contiguous":
        if shards is None:
            shards = datamod.shards_from_index_lists(np.array_split(np.arange(dataset.n_samples), part.n_total), part_seed)
        else:
            shards = datamod.shards_from_index_lists([s.indices for s in shards], part_seed)
    else:
        shards = partition(dataset, part.mode, part.n_total, part_seed)
    if p.kind == "least_squares" and dataset.targets is None:
        # regress on the label values of a LIBSVM file
        dataset.targets = np.asarray(dataset.label_values, dtype=float)[dataset.labels]
    try:
        problem = make_problem(p.kind, dataset)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return problem, shards, dataset


def partition(dataset, mode: str, n: int, seed: int):
    if mode == "iid":
        return datamod.partition_iid(dataset, n, seed)
    if mode == "noniid2class":
        return datamod.partition_noniid_two_class(dataset, n, seed)
    raise UsageError(f"unknown partition mode {mode!r}")


def _optimum(cfg: ExperimentConfig, problem, shards):
    want = cfg.problem.optimum
    if want == "false" or (want == "auto" and cfg.problem.kind != "least_squares"):
        return None
    try:
        return solve_optimum(problem, shards)
    except OptimumNotFound as exc:
        if want == "true":
            raise
        log.warning("x* unavailable, gap and dist_sq left empty: %s", exc)
        return None


def manifest(cfg: ExperimentConfig, extra=None) -> dict:
    n = cfg.partition.n_total
    part_seed = cfg.seed if cfg.partition.seed is None else cfg.partition.seed
    body = {
        "fedsps_version": __version__,
        "numpy_version": np.__version__,
        "config_sha256": cfg.digest(),
        "config": cfg.model_dump(mode="json"),
        "seeds": {
            "master": cfg.seed,
            "partition": part_seed,
            # each client draws batches from default_rng([client_stream, master])
            "client_streams": [rngmod.derive_seed(part_seed, rngmod.CLIENT, i) for i in range(n)],
        },
    }
    body.update(extra or {})
    return body


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.seed, args.format, args.out)
    problem, shards, _ = build_experiment(cfg)
    x_star = _optimum(cfg, problem, shards)
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    trace_path = out / f"trace.{cfg.output.format}"
    status = "ok"
    try:
        history = run(cfg.federation_config(), problem, shards, x_star=x_star, threads=args.threads)
    except NumericalDivergence as exc:
        history = exc.history
        status = "diverged"
        log.error("run diverged: %s", exc)
    emit(history.rounds if history else [], cfg.output.format, trace_path)
    extra = {"status": status, "rounds_completed": len(history.rounds) if history else 0}
    _write_json(out / "manifest.json", manifest(cfg, extra))
    if status == "diverged":
        return EXIT_DIVERGED
    last = history.rounds[-1]
    print(f"{cfg.federation.method.value}: {len(history.rounds)} traced rounds, final loss {last.loss:.6g}")
    return EXIT_OK


def parse_grid(text) -> tuple[float, ...]:
    if text is None:
        return DEFAULT_GRID
    try:
        values = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise UsageError(f"bad grid {text!r}") from exc
    if not values or not all(v > 0 and math.isfinite(v) for v in values):
        raise UsageError("grid values must be positive and finite")
    return tuple(sorted(set(values)))


def grid_search(cfg: ExperimentConfig, gammas, threads: int = 1, problem=None, shards=None) -> list[dict]:
    """FedAvg final training loss for every constant stepsize; diverged cells get loss=None."""
    if problem is None:
        problem, shards, _ = build_experiment(cfg)
    base = cfg.model_copy(update={"federation": cfg.federation.model_copy(update={"method": Method.FEDAVG})})
    rows = []
    for gamma in gammas:
        cell = base.model_copy(update={"stepsize": base.stepsize.model_copy(update={"gamma_b": gamma})})
        try:
            h = run(cell.federation_config(), problem, shards, threads=threads)
            loss = client_loss(problem, h.x_final, shards)
            rows.append({"gamma": gamma, "final_loss": loss, "diverged": False})
        except NumericalDivergence:
            rows.append({"gamma": gamma, "final_loss": None, "diverged": True})
    return rows


def grid_best(rows) -> dict | None:
    ok = [r for r in rows if not r["diverged"] and math.isfinite(r["final_loss"])]
    return min(ok, key=lambda r: (r["final_loss"], r["gamma"])) if ok else None


def cmd_grid(args) -> int:
    cfg = load_config(args.config, args.seed, args.format, args.out)
    gammas = parse_grid(args.grid)
    rows = grid_search(cfg, gammas, threads=args.threads)
    best = grid_best(rows)
    print(f"{'gamma':>12} {'final_loss':>22}")
    for r in rows:
        shown = "diverged" if r["diverged"] else format(r["final_loss"], ".17g")
        print(f"{r['gamma']:>12g} {shown:>22}")
    print("best: " + ("none (every cell diverged)" if best is None else f"gamma={best['gamma']:g}"))
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "grid.json", {"cells": rows, "best": best})
    _write_json(out / "manifest.json", manifest(cfg, {"grid": list(gammas)}))
    return EXIT_OK


def cmd_verify(args) -> int:
    from fedsps import suites

    if args.suite not in suites.SUITES + ("all",):
        raise UsageError(f"unknown suite {args.suite!r}; choose from {', '.join(suites.SUITES + ('all',))}")
    verdicts = suites.run_suite(args.suite, seed=args.seed or 0)
    if args.format == "json":
        print(verdicts_json(verdicts))
    else:
        print(format_verdicts(verdicts))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(verdicts_json(verdicts) + "\n", encoding="utf-8")
    return EXIT_OK if all(v.passed for v in verdicts) else EXIT_VERIFY


def cmd_partition(args) -> int:
    try:
        dataset = datamod.load_libsvm(args.dataset)
    except OSError as exc:
        raise UsageError(f"cannot read dataset {args.dataset}: {exc.strerror or exc}") from exc
    seed = args.seed or 0
    shards = partition(dataset, args.mode, args.n, seed)
    body = {
        "mode": args.mode,
        "n": args.n,
        "seed": seed,
        "shards": [[int(i) for i in s.indices] for s in shards],
    }
    text = json.dumps(body, separators=(",", ":")) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
    common.add_argument("--out", default=None, help="output directory (run/grid) or file (verify/partition)")
    common.add_argument("--format", choices=("csv", "json"), default=None)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fedsps", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"fedsps {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="run one experiment")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("grid", parents=[common], help="FedAvg stepsize grid search")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", default=None, help="comma-separated stepsizes (default 1e-4,...,1.0)")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("verify", parents=[common], help="run a built-in verification suite")
    p.add_argument("suite", help="stepsize | heterogeneity | equivalence | convergence | all")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("partition", parents=[common], help="write client index lists for a LIBSVM file")
    p.add_argument("dataset")
    p.add_argument("--mode", choices=("iid", "noniid2class"), default="iid")
    p.add_argument("--n", type=int, default=10)
    p.set_defaults(func=cmd_partition)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalDivergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except FedSpsError as exc:
        # data errors (parse, partition feasibility, lower bound) are input problems
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
