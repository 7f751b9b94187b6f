"""Command line entry point: ``roughsde <command> --config FILE [overrides]``.

Commands: lift, integrate, sew-diagnose, solve, converge, stability, split.
Every run writes its artefacts atomically into the output directory together
with ``run.json`` (resolved config, seed, library version). Exit status is 0
on success, 2 for usage and config errors and 1 for runtime failures.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, rng
from .controlled import ControlledPath, compose, make_field
from .harness import (ConfigError, ExperimentConfig, _jsonable, build_rough_path, emit_report,
                      run_convergence_study, run_stability_study)
from .io import atomic_write_text, save_arrays
from .roughpath import chen_defect, symmetrization_defect
from .branching import BranchedEnsemble
from .sewing import Germ, rsi_backward, rsi_forward, sew
from .solver import doob_meyer_split, remainder_diagnostics, solve_local, solve_rsde
from .timegrid import make_grid

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

COMMANDS = ("lift", "integrate", "sew-diagnose", "solve", "converge", "stability", "split")
OUTPUT_ENV = "RSDE_OUTPUT_ROOT"
COMMAND_TABLES = ("lift", "integrate", "sew", "solve", "split")


class UsageError(Exception):
    pass


def _load_config(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        with p.open("rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"cannot parse config {p}: {exc}") from exc


def _resolve(args) -> dict:
    cfg = _load_config(args.config) if args.config else {}
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.n_samples is not None:
        cfg["n_samples"] = args.n_samples
    return cfg


def _split_tables(raw: dict):
    raw = dict(raw)
    tables = {k: raw.pop(k) for k in COMMAND_TABLES if k in raw}
    return raw, tables


def _experiment(raw: dict, workers: int) -> ExperimentConfig:
    base, _ = _split_tables(raw)
    base.setdefault("coefficients", {})
    cfg = ExperimentConfig.from_dict(base)
    cfg.workers = workers
    return cfg


def _grid(raw: dict):
    N = int(raw.get("N", raw.get("ladder", [256])[-1]))
    if N < 1:
        raise ConfigError("N must be positive")
    return make_grid(float(raw.get("T", 1.0)), N)


def _out_dir(args) -> Path:
    if args.output:
        return Path(args.output)
    root = os.environ.get(OUTPUT_ENV, "rsde-output")
    return Path(root) / args.command


def _write_json(path: Path, obj) -> None:
    atomic_write_text(path, json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n")


# --------------------------------------------------------------------- commands

def cmd_lift(raw, out: Path, workers: int) -> dict:
    grid = _grid(raw)
    opts = raw.get("rough")
    if not opts:
        raise ConfigError("lift needs a [rough] table")
    dim = int(raw.get("dim", opts.get("dim", 1)))
    opts = {k: v for k, v in opts.items() if k != "dim"}
    rp = build_rough_path(opts, grid, dim, int(raw.get("seed", 0)), int(raw.get("n_samples", 1)))
    save_arrays(out / "rough.bin", grid, X=rp.X, anchor=rp.anchor())
    rep = dict(kind="lift", N=grid.N, dim=dim, flavor=rp.flavor, alpha=rp.alpha,
               chen_defect=chen_defect(rp), holder_norm=np.max(rp.holder_norm()),
               XX_0T_mean=np.mean(rp.anchor()[..., -1, :, :].reshape(-1, dim, dim), axis=0))
    if rp.flavor == "geometric":
        rep["symmetrization_defect"] = symmetrization_defect(rp)
    return rep


def _integrand(raw, grid):
    opts = dict(raw.get("rough") or {})
    dim = int(raw.get("dim", opts.pop("dim", 1)))
    rp = build_rough_path(opts, grid, dim, int(raw.get("seed", 0)), int(raw.get("n_samples", 1)))
    itab = dict(raw.get("integrate", {}).get("integrand", {"name": "linear", "A": 1.0}))
    name = itab.pop("name")
    g = make_field(name, dim, dim, **itab) if dim > 1 else make_field(name, 1, 1, **itab)
    ident = np.broadcast_to(np.eye(dim), rp.X.shape + (dim,))
    cp = compose(g, ControlledPath(grid, rp.X, ident, 1))
    return cp, rp


def cmd_integrate(raw, out: Path, workers: int) -> dict:
    grid = _grid(raw)
    cp, rp = _integrand(raw, grid)
    tab = raw.get("integrate", {})
    levels = tab.get("levels")
    fwd, rep = rsi_forward(cp, rp, levels=levels, m=float(raw.get("m", 2.0)))
    bwd, _ = rsi_backward(cp, rp, levels=levels, m=float(raw.get("m", 2.0)))
    save_arrays(out / "integral.bin", rep.grid, forward=fwd.Z, backward=bwd)
    gap = np.abs(fwd.Z - bwd)
    return dict(kind="integrate", total_mean=np.mean(rep.total.reshape(-1, rep.total.shape[-1]), axis=0),
                forward_backward_max_gap=float(np.max(gap)), sew=rep.as_dict())


def cmd_sew(raw, out: Path, workers: int) -> dict:
    grid = _grid(raw)
    tab = raw.get("sew", {})
    germ_kind = tab.get("germ", "ito")
    levels = tab.get("levels")
    m = float(raw.get("m", 2.0))
    if germ_kind == "ito":
        M = int(raw.get("n_samples", 256))
        B = rng.cumulative(rng.brownian_increments(grid, M, 1, int(raw.get("seed", 0)), "B"))[..., 0]

        def A(i, j):
            return np.take(B, i, axis=1) * (np.take(B, j, axis=1) - np.take(B, i, axis=1))
        rep = sew(Germ(A, grid, (), (M,)), grid, levels, m)
        exact = 0.5 * (B[:, -1] ** 2 - grid.T)
        err = [float(np.sqrt(np.mean((t - exact) ** 2))) for t in rep.level_totals]
        return dict(kind="sew-diagnose", germ="ito", report=rep.as_dict(), error_vs_exact=err)
    if germ_kind == "rough_integral":
        cp, rp = _integrand(raw, grid)
        _, rep = rsi_forward(cp, rp, levels=levels, m=m)
        return dict(kind="sew-diagnose", germ="rough_integral", report=rep.as_dict())
    raise ConfigError(f"unknown germ {germ_kind!r}")


def cmd_solve(raw, out: Path, workers: int) -> dict:
    cfg = _experiment(raw, workers)
    _, tables = _split_tables(raw)
    tab = tables.get("solve", {})
    method = tab.get("method", cfg.method)
    coeffs = cfg.build_coefficients()
    grid = make_grid(cfg.T, int(tab.get("N", cfg.ladder[-1])))
    noise = None
    if coeffs.sigma is not None:
        noise = rng.brownian_increments(grid, cfg.n_samples, coeffs.dim_B, cfg.seed, "B")
    rp = build_rough_path(cfg.rough, grid, coeffs.dim_X, cfg.seed, cfg.n_samples)
    xi = np.broadcast_to(np.asarray(cfg.xi, dtype=np.float64), (cfg.n_samples, coeffs.w))
    arrays = {}
    if method == "local":
        traj, tau = solve_local(coeffs, rp, noise, xi, grid, workers=workers)
        finite = tau[np.isfinite(tau)]
        hist, edges = np.histogram(finite, bins=int(tab.get("bins", 16)), range=(0.0, grid.T))
        extra = dict(exit_time_histogram=dict(counts=hist, edges=edges), tau_mean=float(np.mean(tau)),
                     splice_max_gap=traj.info["splice_max_gap"], tau_monotone=traj.info["tau_monotone"])
        arrays["tau"] = tau
    else:
        traj = solve_rsde(coeffs, rp, noise, xi, grid, method, workers)
        extra = {}
        if method == "picard":
            extra["picard"] = {k: traj.info[k] for k in ("iterations", "converged", "final_metric")}
    arrays["Y"] = traj.Y
    summary = traj.summary()
    summary.update(kind="solve", method=method, **extra)
    if cfg.remainder:
        opts = dict(cfg.remainder)
        be = BranchedEnsemble(grid, int(opts.get("n_outer", min(cfg.n_samples, 64))),
                              int(opts.get("n_inner", cfg.n_inner)), coeffs.dim_B, cfg.seed, name="B")
        res = remainder_diagnostics(None, coeffs, rp, None, int(opts.get("fine_factor", 4)), be,
                                    cfg.m, xi=cfg.xi)
        summary["remainder"] = res.report
    summary.pop("history", None)
    save_arrays(out / "trajectory.bin", grid, **arrays)
    return summary


def cmd_converge(raw, out: Path, workers: int) -> dict:
    cfg = _experiment(raw, workers)
    rep = run_convergence_study(cfg, workers)
    emit_report(rep, "csv", out / "convergence.csv")
    return rep


def cmd_stability(raw, out: Path, workers: int) -> dict:
    cfg = _experiment(raw, workers)
    return run_stability_study(cfg, workers=workers)


def cmd_split(raw, out: Path, workers: int) -> dict:
    grid = _grid(raw)
    tab = raw.get("split", {})
    opts = raw.get("rough")
    if not opts:
        raise ConfigError("split needs a [rough] table")
    rp = build_rough_path(opts, grid, 1, int(raw.get("seed", 0)))
    if rp.is_random:
        raise ConfigError("split needs a fixed driver realisation")
    be = BranchedEnsemble(grid, int(tab.get("n_outer", 128)), int(tab.get("n_inner", 128)), 1,
                          int(raw.get("seed", 0)), branch_points=np.arange(grid.N), name="B")
    a = float(tab.get("brownian_weight", 1.0))
    c = float(tab.get("rough_weight", 1.0))
    X = rp.X[:, 0]
    B = be.outer_paths()[..., 0]
    phi = lambda k, b: (a * b[..., 0] + c * X[k])[..., None]
    cp = ControlledPath(grid, (a * B + c * X)[..., None], np.full((be.n_outer, grid.N + 1, 1, 1), c), 1,
                        state_fn=phi)
    res = doob_meyer_split(cp, rp, be, tab.get("levels"))
    k = grid.N // res["grid"].N
    Mref = a * (B[:, ::k] - B[:, :1])
    Jref = c * (X[::k] - X[0])
    scale = float(np.max(np.abs(Jref))) or 1.0
    errM = float(np.max(np.sqrt(np.mean((res["M"][..., 0] - Mref) ** 2, axis=0))))
    errJ = float(np.max(np.sqrt(np.mean((res["J"][..., 0] - Jref) ** 2, axis=0))))
    save_arrays(out / "split.bin", res["grid"], M=res["M"], J=res["J"])
    return dict(kind="split", N=grid.N, n_outer=be.n_outer, n_inner=be.n_inner,
                sup_L2_error_M=errM, sup_L2_error_J=errJ, X_sup=scale,
                relative_error_M=errM / scale, relative_error_J=errJ / scale,
                martingale_max_z=res["martingale_max_z"], jz_fit=res["jz_fit"])


HANDLERS = {"lift": cmd_lift, "integrate": cmd_integrate, "sew-diagnose": cmd_sew, "solve": cmd_solve,
            "converge": cmd_converge, "stability": cmd_stability, "split": cmd_split}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="roughsde", description="Rough stochastic differential equations.")
    p.add_argument("--version", action="version", version=f"roughsde {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True
    helps = {"lift": "build a rough path and check Chen's relation",
             "integrate": "rough integral of g(X) dX, forward and backward",
             "sew-diagnose": "dyadic Riemann sums and coherence of a germ",
             "solve": "solve a rough SDE (davie, picard or local)",
             "converge": "strong error versus a grid ladder",
             "stability": "output/input distance ratios under perturbations",
             "split": "Doob-Meyer split of B + X"}
    for name in COMMANDS:
        sp = sub.add_parser(name, help=helps[name], description=helps[name])
        sp.add_argument("--config", help="TOML config file")
        sp.add_argument("--seed", type=int, help="master seed (64-bit)")
        sp.add_argument("--output", help=f"output directory (default ${OUTPUT_ENV}/<command>)")
        sp.add_argument("--workers", type=int, default=None, help="worker threads (default: logical cores)")
        sp.add_argument("--n-samples", dest="n_samples", type=int, help="ensemble size")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    workers = args.workers if args.workers is not None else (os.cpu_count() or 1)
    if workers < 1:
        print("roughsde: error: --workers must be >= 1", file=sys.stderr)
        return 2
    try:
        raw = _resolve(args)
        out = _out_dir(args)
        result = HANDLERS[args.command](raw, out, workers)
        cfg_obj = None
        if args.command in ("converge", "stability"):
            cfg_obj = _experiment(raw, workers)
        emit_report(result, "json", out / "report.json", cfg_obj)
        _write_json(out / "run.json", dict(command=args.command, config=raw, seed=raw.get("seed", 0),
                                           version=__version__))
    except (UsageError, ConfigError) as exc:
        print(json.dumps(dict(error=type(exc).__name__, message=str(exc))), file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: structured message, non-zero status
        print(json.dumps(dict(error=type(exc).__name__, message=str(exc))), file=sys.stderr)
        return 1
    print(str(out / "report.json"))
    return 0


if __name__ == "__main__":
    sys.exit(main())
