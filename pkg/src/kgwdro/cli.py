"""Command-line front end: ``kgwdro {fit,gridsearch,simulate,contour,penalty}``.

Primary output (JSON or CSV) goes to standard output or the named files,
logs and progress to standard error. Exit codes: 0 success, 2 bad
arguments, 3 bad input file, 4 solver did not converge (result still
written), 5 every simulation repetition failed.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .estimators import Loss, SolverConfig, Status
from .io import DataFormatError, dumps, manifest, read_dataset, read_matrix, read_thetas
from .losses import Task
from .penalties import (
    PriorSpan,
    mahalanobis_span_distance,
    norm_index,
    penalty_contour,
    psi_norm,
    span_distance,
)
from .selection import FitSpec, Grid, grid_search, make_log_grid
from .simulation import SimConfig, default_config, run_simulation

log = logging.getLogger("kgwdro")

JOBS_ENV = "KGWDRO_JOBS"

EXIT_OK, EXIT_ARGS, EXIT_DATA, EXIT_NOCONV, EXIT_ALLFAIL = 0, 2, 3, 4, 5

TASKS = ("linreg-strong", "linreg-weak", "logistic", "hinge", "mahalanobis")


class UsageError(Exception):
    """Argument combination that argparse alone cannot reject."""


# --- argument types -------------------------------------------------------------

def _float_list(text: str) -> list:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def parse_grid(text: str):
    """``lo:hi:n`` -> log-spaced :class:`Grid`; a bare number -> one-cell grid."""
    parts = text.split(":")
    try:
        if len(parts) == 1:
            v = float(parts[0])
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError
            return [v]
        if len(parts) == 3:
            lo, hi, n = float(parts[0]), float(parts[1]), int(parts[2])
            if n == 1 and lo == hi and lo >= 0:
                return [lo]
            return make_log_grid(lo, hi, n)
    except ValueError:
        pass
    raise argparse.ArgumentTypeError(f"grid must be 'lo:hi:n' or a single number, got {text!r}")


def _p_value(text: str):
    try:
        return norm_index(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _a_tokens(text: str) -> list:
    """``inf`` (or ``strong``) is the strong-transfer limit, i.e. ``a = 0``."""
    out = []
    for tok in (t.strip() for t in text.split(",") if t.strip()):
        if tok.lower() in ("inf", "strong"):
            out.append((tok, 0.0))
            continue
        try:
            a = float(tok)
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad a value {tok!r}") from None
        if not a >= 0:
            raise argparse.ArgumentTypeError(f"a values must be >= 0, got {tok!r}")
        out.append((tok, a))
    if not out:
        raise argparse.ArgumentTypeError("empty a list")
    return out


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


# --- shared helpers --------------------------------------------------------------

def _task_setup(args):
    """(data task, loss) implied by ``--task`` and ``--loss``."""
    if args.task in ("linreg-strong", "linreg-weak"):
        return Task.REGRESSION, Loss.SQRT_LINEAR
    if args.task in ("logistic", "hinge"):
        return Task.CLASSIFICATION, Loss(args.task)
    loss = Loss(args.loss.replace("-", "_"))
    task = Task.REGRESSION if loss is Loss.SQRT_LINEAR else Task.CLASSIFICATION
    return task, loss


def _load_prior(args, d: int):
    """PriorSpan (strong tasks) or a single theta vector (weak task)."""
    if args.theta is None:
        if args.task == "linreg-weak":
            raise UsageError("--task linreg-weak needs --theta")
        if not args.no_prior:
            raise UsageError(f"--task {args.task} needs --theta (or --no-prior for the vanilla fit)")
        return PriorSpan.empty(d)
    if args.no_prior:
        raise UsageError("--theta and --no-prior are mutually exclusive")
    names, thetas = read_thetas(args.theta)
    if thetas.shape[0] != d:
        raise UsageError(f"--theta has {thetas.shape[0]} rows but the data have {d} covariates")
    if args.task == "linreg-weak":
        if thetas.shape[1] != 1:
            raise UsageError("--task linreg-weak takes exactly one prior vector")
        return thetas[:, 0]
    return PriorSpan(thetas, d=d, names=names)


def _fit_spec(args, d: int) -> FitSpec:
    _, loss = _task_setup(args)
    cfg = SolverConfig(max_iter=args.max_iter, tol=args.tol)
    prior = _load_prior(args, d)
    if args.task == "linreg-weak":
        return FitSpec("linear_weak", theta=prior, cfg=cfg)
    if args.task == "linreg-strong":
        return FitSpec("linear_strong", span=prior, p=args.p, cfg=cfg)
    if args.task in ("logistic", "hinge"):
        return FitSpec("classifier_strong", span=prior, p=args.p, loss=loss, cfg=cfg)
    if args.lambda_matrix is None:
        raise UsageError("--task mahalanobis needs --lambda-matrix")
    Lam = read_matrix(args.lambda_matrix)
    return FitSpec("mahalanobis", span=prior, Lambda=Lam, loss=loss, cfg=cfg)


def _params(args, skip=("func", "out", "out_prefix", "manifest_out", "runtime_out", "jobs")) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in skip:
            continue
        if isinstance(v, Grid):
            v = {"lo": v.lo, "hi": v.hi, "n": v.n}
        elif isinstance(v, float) and math.isinf(v):
            v = "inf"
        out[k] = v
    return out


def _inputs(args, names) -> dict:
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


def _emit(text: str, path) -> None:
    if path is None:
        sys.stdout.write(text)
        sys.stdout.flush()
    else:
        Path(path).write_text(text, encoding="utf-8")


def _add_fit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", required=True, choices=TASKS)
    p.add_argument("--theta", help="CSV of prior vectors, one per column")
    p.add_argument("--no-prior", action="store_true",
                   help="fit without prior knowledge (empty span)")
    p.add_argument("--p", type=_p_value, default=2.0, help="penalty norm: 1, 2 or inf")
    p.add_argument("--loss", choices=("sqrt-linear", "logistic", "hinge"), default="sqrt-linear",
                   help="loss for --task mahalanobis")
    p.add_argument("--lambda-matrix", help="headerless CSV with the SPD matrix (mahalanobis)")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=_positive_int, default=50000)
    p.add_argument("--out", help="write JSON here instead of standard output")


# --- commands ----------------------------------------------------------------------

def cmd_fit(args) -> int:
    task, _ = _task_setup(args)
    data = read_dataset(args.data, task)
    spec = _fit_spec(args, data.d)
    if args.delta is None or not args.delta >= 0:
        raise UsageError("--delta must be given and >= 0")
    if spec.uses_lambda_inv and (args.lambda_inv is None or not args.lambda_inv >= 0):
        raise UsageError("--task linreg-weak needs --lambda-inv >= 0")
    res = spec.fit(data, args.delta, args.lambda_inv)
    doc = res.to_dict()
    doc["manifest"] = manifest("fit", _params(args),
                               _inputs(args, ("data", "theta", "lambda_matrix")), __version__)
    _emit(dumps(doc), args.out)
    if res.status is Status.MAX_ITER:
        log.error("solver stopped at max_iter with kkt residual %.3g", res.kkt_residual)
        return EXIT_NOCONV
    return EXIT_OK


def cmd_gridsearch(args) -> int:
    task, _ = _task_setup(args)
    train = read_dataset(args.train, task)
    val = read_dataset(args.val, task)
    spec = _fit_spec(args, train.d)
    grids = {"delta": args.delta_grid}
    if spec.uses_lambda_inv:
        if args.lambda_inv_grid is None:
            raise UsageError("--task linreg-weak needs --lambda-inv-grid")
        grids["lambda_inv"] = args.lambda_inv_grid
    report = grid_search(train, val, spec, grids, warm_start=not args.no_warm_start)
    doc = report.to_dict()
    doc["manifest"] = manifest("gridsearch", _params(args),
                               _inputs(args, ("train", "val", "theta", "lambda_matrix")),
                               __version__)
    _emit(dumps(doc), args.out)
    if report.best_fit is not None and report.best_fit.status is Status.MAX_ITER:
        return EXIT_NOCONV
    return EXIT_OK


def _default_jobs() -> int:
    raw = os.environ.get(JOBS_ENV)
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"{JOBS_ENV} must be an integer, got {raw!r}") from None


def cmd_simulate(args) -> int:
    kw = {"reps": args.reps, "seed": args.seed,
          "jobs": args.jobs if args.jobs is not None else _default_jobs()}
    for flag, name in (("n", "N"), ("s", "scale_s"), ("varrho", "varrho"), ("tol", "tol"),
                       ("max_iter", "max_iter")):
        if getattr(args, flag) is not None:
            kw[name] = getattr(args, flag)
    if args.rho_list is not None:
        kw["rhos"] = tuple(args.rho_list)
    if args.weights is not None:
        if len(args.weights) != 3:
            raise UsageError("--weights takes three numbers")
        kw["weights"] = tuple(args.weights)
    if args.methods is not None:
        kw["methods"] = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    cfg: SimConfig = default_config(args.sim, **kw)

    def progress(done, total, rep, secs, err):
        status = "ok" if err is None else f"FAILED: {err}"
        print(f"[sim {cfg.sim_id.value}] rep {rep} ({done}/{total}) {secs:.2f}s {status}",
              file=sys.stderr, flush=True)

    report = run_simulation(cfg, progress=None if args.quiet else progress)
    doc = report.to_dict()
    doc["manifest"] = manifest("simulate", cfg.to_dict(), {}, __version__, seed=cfg.seed)
    if args.out_prefix is None:
        _emit(dumps(doc), None)
    else:
        _emit(dumps(doc), f"{args.out_prefix}.json")
        _emit(report.to_csv(), f"{args.out_prefix}.csv")
    if args.runtime_out is not None:
        Path(args.runtime_out).write_text(dumps(report.runtime), encoding="utf-8")
    print(f"[sim {cfg.sim_id.value}] {report.n_success}/{cfg.reps} reps succeeded in "
          f"{report.runtime['total_seconds']:.1f}s", file=sys.stderr)
    return EXIT_OK if report.n_success > 0 else EXIT_ALLFAIL


def contour_csv(theta, tokens, level, resolution, extent=None) -> str:
    curves = penalty_contour(theta, [a for _, a in tokens], level, resolution, extent)
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "a", "polyline", "point", "beta1", "beta2"])
    for (tok, a), curve in zip(tokens, curves):
        for k, pts in enumerate(curve.polylines):
            for i, (x1, x2) in enumerate(pts):
                w.writerow([tok, repr(a), k, i, repr(float(x1)), repr(float(x2))])
    return buf.getvalue()


def cmd_contour(args) -> int:
    if len(args.theta) != 2:
        raise UsageError("--theta must have exactly two entries")
    if not any(args.theta):
        raise UsageError("--theta must be non-zero")
    if not args.level >= 0:
        raise UsageError("--level must be >= 0")
    if args.resolution < 3:
        raise UsageError("--resolution must be >= 3")
    _emit(contour_csv(args.theta, args.a_list, args.level, args.resolution, args.extent), args.out)
    if args.manifest_out is not None:
        params = _params(args)
        params["a_list"] = [tok for tok, _ in args.a_list]
        Path(args.manifest_out).write_text(dumps(manifest("contour", params, {}, __version__)),
                                           encoding="utf-8")
    return EXIT_OK


def cmd_penalty(args) -> int:
    beta = np.asarray(args.beta, dtype=float)
    if args.theta is not None:
        names, thetas = read_thetas(args.theta)
    elif args.theta_vec is not None:
        names, thetas = ["theta1"], np.asarray(args.theta_vec, dtype=float)[:, None]
    else:
        names, thetas = [], np.zeros((beta.size, 0))
    if thetas.shape[0] != beta.size:
        raise UsageError("prior vectors and --beta have different lengths")
    span = PriorSpan(thetas, d=beta.size, names=names)
    kappa = None
    if args.kind == "strong":
        value, kappa = span_distance(beta, span, args.p)
    elif args.kind == "weak":
        if thetas.shape[1] != 1 or args.lambda_inv is None:
            raise UsageError("--kind weak needs one prior vector and --lambda-inv")
        value = psi_norm(beta, thetas[:, 0], args.lambda_inv)
    else:
        if args.lambda_matrix is None:
            raise UsageError("--kind mahalanobis needs --lambda-matrix")
        value, kappa = mahalanobis_span_distance(beta, span, read_matrix(args.lambda_matrix))
    doc = {"value": float(value)}
    if kappa is not None:
        doc["kappa"] = [float(k) for k in kappa]
    doc["manifest"] = manifest("penalty", _params(args),
                               _inputs(args, ("theta", "lambda_matrix")), __version__)
    _emit(dumps(doc), args.out)
    return EXIT_OK


# --- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kgwdro", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit one estimator")
    _add_fit_flags(p)
    p.add_argument("--data", required=True, help="CSV with covariates and a 'y' column")
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--lambda-inv", type=float, help="a = 1/lambda for --task linreg-weak")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("gridsearch", help="select delta (and lambda_inv) on a validation split")
    _add_fit_flags(p)
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--delta-grid", type=parse_grid, required=True, help="lo:hi:n or a number")
    p.add_argument("--lambda-inv-grid", type=parse_grid, help="lo:hi:n or a number")
    p.add_argument("--no-warm-start", action="store_true")
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("simulate", help="run a simulation study")
    p.add_argument("--sim", required=True, choices=("1", "2", "3"))
    p.add_argument("--reps", type=_positive_int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=_positive_int, help="target training size")
    p.add_argument("--s", type=float, help="scale of the target coefficient")
    p.add_argument("--rho-list", type=_float_list)
    p.add_argument("--weights", type=_float_list, help="three source weights (sim 3)")
    p.add_argument("--varrho", type=float, help="source correlation (sim 3)")
    p.add_argument("--methods", help="comma-separated subset of the sim's methods")
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", type=_positive_int)
    p.add_argument("--jobs", type=_positive_int,
                   help=f"worker processes (default: ${JOBS_ENV} or 1)")
    p.add_argument("--out-prefix", help="write PREFIX.json and PREFIX.csv")
    p.add_argument("--runtime-out", help="write timing information here")
    p.add_argument("-q", "--quiet", action="store_true", help="no per-rep progress lines")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("contour", help="level sets of the weak-transfer penalty in 2-D")
    p.add_argument("--theta", type=_float_list, required=True)
    p.add_argument("--a-list", type=_a_tokens, required=True,
                   help="values of a = 1/lambda; 'inf' (lambda = inf) is the strong limit a = 0")
    p.add_argument("--level", type=float, default=1.0)
    p.add_argument("--resolution", type=int, default=361)
    p.add_argument("--extent", type=float, help="half-length of the strong-limit strip")
    p.add_argument("--out")
    p.add_argument("--manifest-out")
    p.set_defaults(func=cmd_contour)

    p = sub.add_parser("penalty", help="evaluate a penalty at one coefficient vector")
    p.add_argument("--beta", type=_float_list, required=True)
    p.add_argument("--kind", choices=("strong", "weak", "mahalanobis"), default="strong")
    p.add_argument("--theta", help="CSV of prior vectors")
    p.add_argument("--theta-vec", type=_float_list, help="a single prior vector inline")
    p.add_argument("--p", type=_p_value, default=2.0)
    p.add_argument("--lambda-inv", type=float)
    p.add_argument("--lambda-matrix")
    p.add_argument("--out")
    p.set_defaults(func=cmd_penalty)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on bad syntax
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DataFormatError as exc:
        print(f"kgwdro: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (UsageError, ValueError) as exc:
        print(f"kgwdro: error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except BrokenPipeError:
        # reader went away (e.g. piped into head); silence the flush at exit
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return 0


if __name__ == "__main__":
    sys.exit(main())
