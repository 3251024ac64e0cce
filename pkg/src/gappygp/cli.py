"""Command-line interface: generate, reconstruct, sweep, precon-study, predict, oracle-check.

Every command echoes its fully resolved configuration into a ``run.json``
manifest next to its outputs, numerical payloads are little-endian float64
binaries, CSV numbers carry 17 significant digits, and all file writes are
atomic (temp + rename). Exit codes: 0 success, 1 numerical failure, 2 usage
error. The ``GAPPYGP_JOBS`` environment variable sets the default ``--jobs``
for sweeps.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .grids import GridSpec, atomic_write_bytes, load_dataset, save_dataset
from .harness import (
    DEFAULT_ORACLE_CAP,
    DenseOracle,
    OracleCapError,
    PreconStudyConfig,
    RELATIVE_CSV_COLUMNS,
    SweepConfig,
    apply_gaps,
    gen_rastrigin,
    gen_wave_membrane,
    rastrigin_grid,
    rows_to_csv,
    run_gappiness_sweep,
    run_precon_study,
)
from .kernels import Hyperparams, ProductKernel, SquaredExponential
from .model import GPModel, load_model, save_model
from .solvers import CGConfig

EXIT_OK = 0
EXIT_NUMERICAL = 1
EXIT_USAGE = 2


def _write_run_manifest(out_dir: Path, command: str, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "resolved_config": resolved}
    atomic_write_bytes(out_dir / "run.json", (json.dumps(payload, indent=2) + "\n").encode())


def _kernel_from_args(args, ndim: int) -> Hyperparams:
    thetas = args.theta
    if thetas is None:
        raise ValueError("--theta is required")
    if len(thetas) == 1:
        thetas = thetas * ndim
    if len(thetas) != ndim:
        raise ValueError(f"--theta given {len(thetas)} times, dataset has {ndim} axes")
    kernel = ProductKernel(tuple(SquaredExponential(t) for t in thetas),
                           amplitude=getattr(args, "amplitude", None))
    return Hyperparams(kernel, args.sigma2)


def _load_gapped(args):
    data = load_dataset(args.dataset)
    if getattr(args, "gappiness", None):
        data = apply_gaps(data, args.gappiness, args.seed)
    return data


# ---------------------------------------------------------------------------
# Subcommands.
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    out = Path(args.out)
    if args.kind == "rastrigin":
        data = gen_rastrigin(rastrigin_grid(args.nx, args.ny, (args.lo, args.hi)))
    else:
        data = gen_wave_membrane(args.nx, args.ny, args.nt, wave_speed=args.wave_speed,
                                 seed=args.seed)
    save_dataset(data, out)
    _write_run_manifest(out, "generate", {
        "kind": args.kind, "nx": args.nx, "ny": args.ny,
        "nt": getattr(args, "nt", None), "wave_speed": getattr(args, "wave_speed", None),
        "lo": getattr(args, "lo", None), "hi": getattr(args, "hi", None),
        "seed": args.seed, "M": data.grid.size,
    })
    print(f"wrote dataset with M={data.grid.size} to {out}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    data = _load_gapped(args)
    hyper = _kernel_from_args(args, data.grid.ndim)
    model = GPModel(hyper, data)
    cg = CGConfig(tolerance=args.tol, max_iters=args.max_iters)
    result = model.fit(args.method, config=cg, rank=args.rank, gamma=args.gamma)

    out = Path(args.out)
    resolved = {
        "dataset": str(args.dataset), "method": args.method, "rank": args.rank,
        "gamma": result.gamma if args.method == "pg" else args.gamma,
        "tol": args.tol, "max_iters": args.max_iters, "sigma2": args.sigma2,
        "theta": args.theta, "amplitude": args.amplitude,
        "gappiness": args.gappiness, "seed": args.seed,
        "M": data.grid.size, "N": data.idx.n_observed, "L": data.idx.n_gaps,
    }
    save_model(model, out, fit_info={"resolved_config": resolved,
                                     "report": result.report.to_json()})
    _write_run_manifest(out, "reconstruct", resolved)
    status = "converged" if result.report.converged else f"FAILED ({result.report.status})"
    print(f"{args.method} solve: {result.report.iterations} iterations, "
          f"rel residual {result.report.rel_residual:.3e}, {status}")
    return EXIT_OK if result.report.converged else EXIT_NUMERICAL


def cmd_sweep(args) -> int:
    cfg = SweepConfig.from_json(Path(args.config).read_text())
    out = Path(args.out)
    rows = run_gappiness_sweep(cfg, jobs=args.jobs)
    out.mkdir(parents=True, exist_ok=True)
    rows_to_csv(rows, out / "sweep.csv")
    _write_run_manifest(out, "sweep", json.loads(cfg.to_json()))
    failed = [r for r in rows if r.status != "ok"]
    print(f"sweep wrote {len(rows)} rows to {out / 'sweep.csv'} ({len(failed)} failed)")
    return EXIT_OK if not failed else EXIT_NUMERICAL


def cmd_precon_study(args) -> int:
    cfg = PreconStudyConfig.from_json(Path(args.config).read_text())
    out = Path(args.out)
    rows, relative = run_precon_study(cfg)
    out.mkdir(parents=True, exist_ok=True)
    rows_to_csv(rows, out / "precon_study.csv")
    rows_to_csv(relative, out / "precon_study_relative.csv", columns=RELATIVE_CSV_COLUMNS)
    _write_run_manifest(out, "precon-study", json.loads(cfg.to_json()))
    failed = [r for r in rows if r.status != "ok"]
    print(f"precon study wrote {len(rows)} rows ({len(failed)} failed)")
    return EXIT_OK if not failed else EXIT_NUMERICAL


def _parse_grid_axis(spec: str) -> np.ndarray:
    try:
        lo, hi, count = spec.split(":")
        return np.linspace(float(lo), float(hi), int(count))
    except ValueError as exc:
        raise ValueError(f"bad --grid-axis {spec!r}; expected lo:hi:count") from exc


def cmd_predict(args) -> int:
    model = load_model(args.model)
    if not model.is_fitted:
        raise ValueError(f"model at {args.model} has no weight vector; run reconstruct first")
    d = model.data.grid.ndim

    if args.grid_axis:
        if len(args.grid_axis) != d:
            raise ValueError(f"--grid-axis given {len(args.grid_axis)} times, model has {d} axes")
        test_grid = GridSpec(tuple(_parse_grid_axis(s) for s in args.grid_axis))
        points = test_grid.all_points()
        means = model.predict_mean_grid(test_grid)
    elif args.points:
        points = np.loadtxt(args.points, delimiter=",", ndmin=2)
        if points.shape[1] != d:
            raise ValueError(f"points file has {points.shape[1]} columns, model has {d} axes")
        means = np.array([model.predict_mean_point(x) for x in points])
    else:
        raise ValueError("one of --grid-axis or --points is required")

    cg = CGConfig(tolerance=args.tol)
    variances = None
    if args.variance == "exact":
        variances = np.array([
            model.predict_var_point_exact(x, method=args.method, rank=args.rank, config=cg)
            for x in points
        ])
    elif args.variance == "nystrom":
        variances = np.array([model.predict_var_point_nystrom(x, args.rank) for x in points])

    header = [f"x{l}" for l in range(d)] + ["mean"] + (["variance"] if variances is not None else [])
    lines = [",".join(header)]
    for i, x in enumerate(points):
        cells = ["%.17g" % v for v in x] + ["%.17g" % means[i]]
        if variances is not None:
            cells.append("%.17g" % variances[i])
        lines.append(",".join(cells))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(out, ("\n".join(lines) + "\n").encode())
    _write_run_manifest(out.parent, "predict", {
        "model": str(args.model), "variance": args.variance, "method": args.method,
        "rank": args.rank, "tol": args.tol, "grid_axis": args.grid_axis,
        "points": args.points, "n_points": int(points.shape[0]),
    })
    print(f"wrote {points.shape[0]} predictions to {out}")
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    data = _load_gapped(args)
    m = data.grid.size
    if m > args.cap:
        print(f"refused: M={m} exceeds the dense-oracle cap {args.cap}", file=sys.stderr)
        return EXIT_USAGE
    hyper = _kernel_from_args(args, data.grid.ndim)
    oracle = DenseOracle(hyper.kernel, data, args.sigma2, cap=args.cap)
    alpha_ref = oracle.alpha_x()
    ref_norm = max(np.linalg.norm(alpha_ref), 1e-300)
    cg = CGConfig(tolerance=args.tol)

    checks = []
    for method in ("pg", "ig", "fg"):
        model = GPModel(hyper, data)
        result = model.fit(method, config=cg, rank=args.rank, gamma=args.gamma)
        err = np.linalg.norm(result.alpha[data.idx.x_indices] - alpha_ref) / ref_norm
        ok = result.report.converged and err <= args.alpha_tol
        checks.append(ok)
        note = ""
        if method == "fg" and data.idx.n_gaps == 0:
            note = " (no gaps: direct eigen-solve short-circuit, 0 CG iterations)"
        print(f"{'ok  ' if ok else 'FAIL'} {method}: alpha_X rel err {err:.3e} "
              f"(tol {args.alpha_tol:g}), {result.report.iterations} iterations{note}")
        if method == "fg" and data.idx.n_gaps > 0:
            yz_ref = oracle.y_z_expected()
            yz_err = np.linalg.norm(result.y_filled - yz_ref) / max(np.linalg.norm(yz_ref), 1e-300)
            az = np.abs(result.alpha[data.idx.z_indices]).max()
            amax = max(np.abs(result.alpha).max(), 1e-300)
            ok_fill = yz_err <= args.alpha_tol and az <= 1e-5 * amax
            checks.append(ok_fill)
            print(f"{'ok  ' if ok_fill else 'FAIL'} fg fill: y_Z rel err {yz_err:.3e}, "
                  f"max |alpha_Z| / max |alpha| = {az / amax:.3e}")

    if all(checks):
        print(f"all {len(checks)} oracle checks passed (M={m}, N={data.idx.n_observed})")
        return EXIT_OK
    print(f"{sum(not c for c in checks)} of {len(checks)} oracle checks FAILED", file=sys.stderr)
    return EXIT_NUMERICAL


# ---------------------------------------------------------------------------
# Parser.
# ---------------------------------------------------------------------------


def _add_kernel_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--theta", type=float, action="append",
                   help="SE lengthscale; repeat once per axis or give once to broadcast")
    p.add_argument("--sigma2", type=float, required=True, help="noise variance")
    p.add_argument("--amplitude", type=float, default=None, help="signal amplitude a^2")


def _add_gap_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--gappiness", type=float, default=None,
                   help="mask this fraction of cells before solving")
    p.add_argument("--seed", type=int, default=0, help="gap-mask RNG seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gappygp",
        description="Exact GP regression on gappy Cartesian grids (Kronecker-structured).",
        epilog="GAPPYGP_JOBS sets the default --jobs for sweep commands.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    default_jobs = int(os.environ.get("GAPPYGP_JOBS", "1"))

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("kind", choices=["rastrigin", "wave"])
    p.add_argument("--nx", type=int, required=True)
    p.add_argument("--ny", type=int, required=True)
    p.add_argument("--nt", type=int, default=16, help="frames (wave only)")
    p.add_argument("--wave-speed", type=float, default=1.0)
    p.add_argument("--lo", type=float, default=-2.0, help="domain low edge (rastrigin)")
    p.add_argument("--hi", type=float, default=2.0, help="domain high edge (rastrigin)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("reconstruct", help="solve for the weight vector and fill gaps")
    p.add_argument("--dataset", required=True)
    p.add_argument("--method", choices=["pg", "ig", "fg"], required=True)
    _add_gap_flags(p)
    _add_kernel_flags(p)
    p.add_argument("--rank", type=int, default=0, help="preconditioner rank p (0 = none)")
    p.add_argument("--gamma", type=float, default=None, help="PG penalty (default 1e8*(lambda_max+sigma2))")
    p.add_argument("--tol", type=float, default=1e-6, help="CG relative-residual tolerance")
    p.add_argument("--max-iters", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("sweep", help="run a gappiness sweep from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=default_jobs)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("precon-study", help="run the preconditioner-efficacy study")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=default_jobs)
    p.set_defaults(func=cmd_precon_study)

    p = sub.add_parser("predict", help="posterior mean (and variance) at test points")
    p.add_argument("--model", required=True, help="directory written by reconstruct")
    p.add_argument("--grid-axis", action="append", default=None, metavar="LO:HI:COUNT",
                   help="test-grid axis; repeat once per dimension")
    p.add_argument("--points", default=None, help="CSV file of test points (d columns)")
    p.add_argument("--variance", choices=["none", "exact", "nystrom"], default="none")
    p.add_argument("--method", choices=["pg", "ig", "fg"], default="ig",
                   help="solve route for exact variance")
    p.add_argument("--rank", type=int, default=0, help="preconditioner / Nystrom rank")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("oracle-check", help="compare all methods against the dense oracle")
    p.add_argument("--dataset", required=True)
    _add_gap_flags(p)
    _add_kernel_flags(p)
    p.add_argument("--rank", type=int, default=0)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--alpha-tol", type=float, default=1e-4,
                   help="relative tolerance on alpha_X vs the dense solve")
    p.add_argument("--cap", type=int, default=DEFAULT_ORACLE_CAP)
    p.set_defaults(func=cmd_oracle_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except OracleCapError as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except np.linalg.LinAlgError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
