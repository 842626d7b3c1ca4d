"""``plnnet`` command line.

Exit codes: 0 on success, 1 on bad input or usage, 2 on numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from . import io
from .evaluation import baseline_glasso_log, path_to_ranking, roc_pr
from .exceptions import InputError, NumericalError, PLNError
from .fit import FitConfig, fit, fit_path, null_fit
from .selection import StarsConfig, StarsWarning, ebic, select_ebic_index, stars
from .simulation import TOPOLOGIES, benchmark_instance

logger = logging.getLogger("plnnet")

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 1, 2


class UsageError(InputError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


@dataclass(frozen=True)
class GridSpec:
    """Explicit penalties, or ``count`` values from ``lambda_max`` down by ``min_ratio``."""

    values: tuple[float, ...] = ()
    lambda_max: float | None = None
    min_ratio: float = 1e-3
    count: int = 30

    def __post_init__(self):
        if self.values:
            if any(v < 0 for v in self.values):
                raise InputError("penalties must be non-negative")
            if any(b >= a for a, b in zip(self.values, self.values[1:])):
                raise InputError("explicit penalties must be strictly decreasing")
        if not 0 < self.min_ratio < 1:
            raise InputError("min-ratio must lie in (0, 1)")
        if self.count < 1:
            raise InputError("the grid needs at least one penalty")
        if self.lambda_max is not None and self.lambda_max <= 0:
            raise InputError("lambda-max must be positive")

    def resolve(self, data, cfg: FitConfig) -> list[float] | None:
        if self.values:
            return list(self.values)
        if self.lambda_max is not None:
            return [float(v) for v in np.geomspace(self.lambda_max, self.lambda_max * self.min_ratio, self.count)]
        return None


@dataclass(frozen=True)
class RunConfig:
    command: str
    counts: Path | None = None
    covariates: Path | None = None
    offsets: Path | None = None
    offset_mode: str | None = None
    grid: GridSpec = field(default_factory=GridSpec)
    method: str = "stars"
    seed: int = 0
    outdir: Path = Path(".")
    threads: int = 1

    def __post_init__(self):
        for path in (self.counts, self.covariates, self.offsets):
            if path is not None and not Path(path).is_file():
                raise InputError(f"file not found: {path}")


def _parse_floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise InputError(f"cannot parse penalty list {text!r}") from None


def _add_data_args(p: argparse.ArgumentParser):
    p.add_argument("--counts", type=Path, required=True, help="count table (CSV)")
    p.add_argument("--covariates", type=Path, help="covariate table (CSV)")
    p.add_argument("--offsets", type=Path, help="offset table (CSV)")
    p.add_argument("--offset-mode", choices=io.OFFSET_MODES, help="default: file if --offsets, else none")
    p.add_argument("--no-intercept", action="store_true")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--outer-tol", type=float, default=FitConfig.outer_tol)
    p.add_argument("--max-iter", type=int, default=FitConfig.outer_max_iter)


def _add_grid_args(p: argparse.ArgumentParser):
    p.add_argument("--lambdas", type=str, help="explicit decreasing comma-separated penalties")
    p.add_argument("--lambda-max", type=float)
    p.add_argument("--min-ratio", type=float, default=1e-3)
    p.add_argument("--n-lambda", type=int, default=30)
    p.add_argument("--gamma", type=float, default=0.0, help="EBIC model-space weight")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="plnnet", description="Sparse networks for count data (Poisson log-normal).")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="fit at one penalty")
    _add_data_args(p)
    p.add_argument("--lambda", dest="lam", type=float, required=True)

    p = sub.add_parser("path", help="fit a warm-started penalty path")
    _add_data_args(p)
    _add_grid_args(p)

    p = sub.add_parser("select", help="fit a path and select a penalty")
    _add_data_args(p)
    _add_grid_args(p)
    p.add_argument("--method", choices=("stars", "ebic"), default="stars")
    p.add_argument("--subsamples", type=int, default=StarsConfig.n_subsamples)
    p.add_argument("--subsample-size", type=int)
    p.add_argument("--beta", type=float, default=StarsConfig.beta2, help="StARS instability threshold")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int)

    p = sub.add_parser("simulate", help="write a synthetic benchmark instance")
    p.add_argument("--n", type=int, default=40)
    p.add_argument("--p", type=int, default=20)
    p.add_argument("--nu", type=float, default=10.0, help="depth dispersion")
    p.add_argument("--b", type=float, default=1.0, help="covariate effect size")
    p.add_argument("--topology", choices=TOPOLOGIES, default="erdos_renyi")
    p.add_argument("--u", type=float, default=0.1)
    p.add_argument("--v", type=float, default=0.3)
    p.add_argument("--depth-mean", type=float, default=1000.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("evaluate", help="score a path edge list against a truth edge list")
    p.add_argument("--edges", type=Path, required=True)
    p.add_argument("--truth", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("bench", help="desk-scale simulation study")
    p.add_argument("--replicates", type=int, default=20)
    p.add_argument("--n", type=int, default=40)
    p.add_argument("--p", type=int, default=20)
    p.add_argument("--nu", type=str, default="100,2", help="comma-separated depth dispersions")
    p.add_argument("--b", type=float, default=0.0)
    p.add_argument("--topology", choices=TOPOLOGIES, default="erdos_renyi")
    p.add_argument("--n-lambda", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", type=Path, required=True)
    return parser


def config_from_args(args) -> RunConfig:
    """Validated run configuration (checks input paths and the grid)."""
    grid = _grid_spec(args) if hasattr(args, "n_lambda") and hasattr(args, "lambdas") else GridSpec()
    return RunConfig(
        command=args.command,
        counts=getattr(args, "counts", None),
        covariates=getattr(args, "covariates", None),
        offsets=getattr(args, "offsets", None),
        offset_mode=getattr(args, "offset_mode", None),
        grid=grid,
        method=getattr(args, "method", "stars"),
        seed=getattr(args, "seed", 0),
        outdir=args.out,
        threads=_threads(args),
    )


def _fit_cfg(args) -> FitConfig:
    try:
        return FitConfig(outer_tol=args.outer_tol, outer_max_iter=args.max_iter)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _load(args):
    return io.read_dataset(
        args.counts, args.covariates, args.offsets, args.offset_mode, intercept=not args.no_intercept
    )


def _grid_spec(args) -> GridSpec:
    values = _parse_floats(args.lambdas) if args.lambdas else ()
    return GridSpec(values, args.lambda_max, args.min_ratio, args.n_lambda)


def _threads(args) -> int:
    if getattr(args, "threads", None) is not None:
        if args.threads < 1:
            raise InputError("--threads must be at least 1")
        return args.threads
    return io.thread_budget()


def _path(args, data, cfg):
    grid = _grid_spec(args).resolve(data, cfg)
    return fit_path(data, grid=grid, n_lambda=args.n_lambda, min_ratio=args.min_ratio, cfg=cfg, gamma=args.gamma)


def cmd_fit(args) -> int:
    data = _load(args)
    if args.lam < 0:
        raise InputError("--lambda must be non-negative")
    cfg = _fit_cfg(args)
    res = fit(data, replace(cfg, lam=args.lam), warm=null_fit(data, cfg) if args.lam > 0 else None)
    io.write_results(res, args.out, data)
    return EXIT_OK


def cmd_path(args) -> int:
    data = _load(args)
    path = _path(args, data, _fit_cfg(args))
    io.write_results(path, args.out, data, gamma=args.gamma)
    return EXIT_OK


def cmd_select(args) -> int:
    data = _load(args)
    cfg = _fit_cfg(args)
    path = _path(args, data, cfg)
    profile = None
    if args.method == "stars":
        try:
            scfg = StarsConfig(args.subsamples, args.subsample_size, args.beta, args.seed)
            scfg.size_for(data.n)
        except ValueError as exc:
            raise InputError(str(exc)) from None
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", StarsWarning)
            profile = stars(data, path.grid, scfg, cfg, n_jobs=_threads(args))
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        k = profile.selected_index
    else:
        k = select_ebic_index([ebic(f, data, args.gamma) for f in path.fits])
    io.write_results(path, args.out, data, profile=profile, selected=path.fits[k], gamma=args.gamma)
    print(f"selected lambda {path.grid[k]:.17g} with {path.fits[k].n_edges} edges")
    return EXIT_OK


def cmd_simulate(args) -> int:
    if args.n < 3 or args.p < 2:
        raise InputError("simulate needs n >= 3 and p >= 2")
    if args.nu <= 0 or args.depth_mean <= 0:
        raise InputError("nu and depth-mean must be positive")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        inst = benchmark_instance(
            args.n, args.p, nu=args.nu, b=args.b, topology=args.topology, u=args.u, v=args.v,
            depth_mu=args.depth_mean, seed=args.seed,
        )
    io.write_instance(inst, args.out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    truth, nodes = io.read_truth(args.truth)
    ranking = io.ranking_from_edges(io.read_edges(args.edges), nodes)
    curve = roc_pr(ranking, truth)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = pd.DataFrame(
        [{"auc": curve.auc, "aupr": curve.aupr, "n_ranked": len(ranking), "n_candidates": ranking.n_candidates}]
    )
    io._write_csv(metrics, out / "metrics.csv")
    points = pd.DataFrame({"fpr": curve.fpr, "tpr": curve.tpr, "recall": curve.recall, "precision": curve.precision})
    io._write_csv(points, out / "curve.csv")
    print(f"auc {curve.auc:.6f} aupr {curve.aupr:.6f}")
    return EXIT_OK


def bench_replicate(task) -> list[dict]:
    """Scores of the three methods on one simulated replicate."""
    n, p, nu, b, topology, n_lambda, seed, rep = task
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        inst = benchmark_instance(n, p, nu=nu, b=b, topology=topology, seed=seed)
    data = inst.counts
    zero = data.with_offsets(np.zeros_like(data.O))
    runs = {
        "plnnet_offset": fit_path(data, n_lambda=n_lambda),
        "plnnet_no_offset": fit_path(zero, n_lambda=n_lambda),
        "glasso_log": baseline_glasso_log(data, n_lambda=n_lambda),
    }
    rows = []
    for method, path in runs.items():
        curve = roc_pr(path_to_ranking(path), inst.truth)
        rows.append({"replicate": rep, "nu": nu, "method": method, "auc": curve.auc, "aupr": curve.aupr})
    return rows


def cmd_bench(args) -> int:
    nus = _parse_floats(args.nu)
    if not nus or any(v <= 0 for v in nus):
        raise InputError("--nu needs positive values")
    if args.replicates < 1:
        raise InputError("--replicates must be at least 1")
    seeds = np.random.SeedSequence(args.seed).generate_state(args.replicates)
    tasks = [
        (args.n, args.p, nu, args.b, args.topology, args.n_lambda, int(seeds[r]), r)
        for nu in nus
        for r in range(args.replicates)
    ]
    threads = _threads(args)
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(bench_replicate, tasks))
    else:
        results = [bench_replicate(t) for t in tasks]
    rows = pd.DataFrame([row for chunk in results for row in chunk])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io._write_csv(rows, out / "replicates.csv")
    summary = rows.groupby(["nu", "method"], sort=False)[["auc", "aupr"]].median().reset_index()
    io._write_csv(summary, out / "summary.csv")
    print(summary.to_string(index=False))
    return EXIT_OK


COMMANDS = {
    "fit": cmd_fit,
    "path": cmd_path,
    "select": cmd_select,
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INPUT
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        config_from_args(args)
        return COMMANDS[args.command](args)
    except (NumericalError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InputError, ValueError, OSError, PLNError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
