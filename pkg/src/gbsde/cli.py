"""Command line driver: ``gbsde solve|pde|compare|check|simulate``.

Exit codes: 0 success, 2 configuration error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import CHECK_NAMES, ResultEnvelope, RunConfig
from .errors import ConfigError, GBSDEError
from .forward import ScenarioPolicy, moment_check_initial_lipschitz, moment_check_time_increment, simulate_paths, write_paths_csv
from .gcore import GFunction
from .grid import ValueField, interpolate
from .harness import cross_validate, k_monotonicity, refinement_levels, regularity_report
from .pde_oracle import FdScheme, assemble_F, fd_solve
from .picard import comparison_check, perturbation_sequence, stitch_solve_global

logger = logging.getLogger("gbsde")

THREADS_ENV = "GBSDE_THREADS"
EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3


def fmt(v) -> str:
    """Shortest round-trip text of a float (at most 17 significant digits)."""
    return repr(float(v))


# ------------------------------------------------------------------ writers


def write_field_csv(u: ValueField, path: Path) -> Path:
    """Columns ``t, x_1..x_k, [component], Y, Z_1..Z_d, argmax_gamma_index``."""
    grid = u.grid
    n = u.n
    d = u.Z.shape[-1] if u.Z is not None else 0
    header = ["t"] + [f"x_{i + 1}" for i in range(grid.k)] + (["component"] if n > 1 else [])
    header += ["Y"] + [f"Z_{i + 1}" for i in range(d)] + ["argmax_gamma_index"]
    X = grid.points
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for m, t in enumerate(u.times):
            for l in range(n):
                Y = u.values[m, l].ravel()
                Z = u.Z[m, l].reshape(grid.size, d) if d else None
                arg = u.argmax[m, l].ravel() if u.argmax is not None else None
                for p in range(grid.size):
                    row = [fmt(t)] + [fmt(v) for v in X[p]] + ([str(l + 1)] if n > 1 else [])
                    row.append(fmt(Y[p]))
                    if d:
                        row += [fmt(v) for v in Z[p]]
                    row.append(str(int(arg[p])) if arg is not None else "-1")
                    w.writerow(row)
    return path


def write_slice_dat(u: ValueField, t: float, path: Path) -> Path:
    """Whitespace-separated ``x_1..x_k  u_1..u_n`` rows for one time slice."""
    grid = u.grid
    m = u.time_index(t)
    X = grid.points
    vals = u.values[m].reshape(u.n, -1)
    with open(path, "w") as fh:
        fh.write(f"# t = {fmt(u.times[m])}\n")
        fh.write("# " + " ".join([f"x_{i + 1}" for i in range(grid.k)] + [f"u_{l + 1}" for l in range(u.n)]) + "\n")
        for p in range(grid.size):
            if grid.k == 2 and p > 0 and p % grid.shape[1] == 0:
                fh.write("\n")
            fh.write(" ".join([fmt(v) for v in X[p]] + [fmt(v) for v in vals[:, p]]) + "\n")
    return path


def write_table(rows: list[dict], columns: Sequence[str], path: Path) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r[c] is None else (fmt(r[c]) if isinstance(r[c], float) else r[c]) for c in columns])
    return path


def emit_tables(envelope: ResultEnvelope, out: Path, fields: dict[str, ValueField],
                tables: dict[str, tuple[list[dict], Sequence[str]]]) -> None:
    """Write field dumps, slice files and tables; record their paths in the envelope."""
    formats = envelope.config["outputs"]["formats"]
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, u in fields.items():
            if "csv" in formats:
                envelope.files[f"{name}_csv"] = str(write_field_csv(u, out / f"{name}.csv"))
            if "dat" in formats:
                for t in envelope.config["outputs"]["slice_times"]:
                    m = u.time_index(t)
                    p = write_slice_dat(u, t, out / f"{name}_t{m:05d}.dat")
                    envelope.files[f"{name}_t{m:05d}_dat"] = str(p)
        for name, (rows, cols) in tables.items():
            envelope.files[name] = str(write_table(rows, cols, out / f"{name}.csv"))
    except OSError as exc:
        raise GBSDEError(f"cannot write output under {out}: {exc}") from exc


def probe_values(u: ValueField, probes) -> list[dict]:
    out = []
    for x in probes:
        x = np.asarray(x, dtype=float).reshape(1, -1)
        vals = interpolate(u.grid, u.values[0], x)[:, 0]
        out.append({"t": u.times[0], "x": x[0].tolist(), "u": vals.tolist()})
    return out


# ----------------------------------------------------------------- commands


def cmd_solve(cfg: RunConfig, threads: int):
    prob = cfg.problem()
    grid = cfg.grid()
    t0 = time.perf_counter()
    u, plan = stitch_solve_global(prob.spec, grid, cfg.gammas(prob), cfg.rule(prob), **cfg.solver_opts(threads))
    timings = {"solve": time.perf_counter() - t0}
    diag = {"values": probe_values(u, cfg.data["outputs"]["probes"]), "plan": plan.to_dict(),
            "picard_log": plan.picard_log}
    return diag, timings, {"solution": u}, {}, {}


def cmd_pde(cfg: RunConfig, threads: int):
    prob = cfg.problem()
    grid = cfg.grid()
    sys_ = assemble_F(GFunction(prob.gamma), prob.spec.dyn, prob.spec)
    scheme = FdScheme(grid)
    t0 = time.perf_counter()
    u = fd_solve(sys_, scheme)
    timings = {"pde": time.perf_counter() - t0}
    diag = {"values": probe_values(u, cfg.data["outputs"]["probes"]), "cfl": u.meta}
    return diag, timings, {"pde_solution": u}, {}, {}


def cmd_compare(cfg: RunConfig, threads: int):
    prob = cfg.problem()
    s = cfg.data["solver"]
    t0 = time.perf_counter()
    rep = cross_validate(prob.spec, prob.gamma, refinement_levels(cfg.grid()), name=prob.name or "inline",
                         q=s["quadrature_q"], gamma_m=s["gamma_m"],
                         solver_opts={k: v for k, v in cfg.solver_opts(threads).items()})
    timings = {"compare": time.perf_counter() - t0}
    table = (rep.table(), ["level", "dx", "dt", "sup_distance", "fitted_order"])
    return {"cross_validation": rep.to_dict()}, timings, {}, {"convergence": table}, {"cross_validation": rep.passed}


def _check(name: str, cfg: RunConfig, threads: int) -> tuple[dict, bool]:
    prob = cfg.problem()
    grid = cfg.grid()
    gammas, rule = cfg.gammas(prob), cfg.rule(prob)
    opts = cfg.solver_opts(threads)
    s = cfg.data["solver"]
    if name == "comparison":
        if prob.lower is None:
            raise ConfigError("the comparison check needs problem.lower")
        rep = comparison_check(prob.spec, prob.lower, grid, gammas, rule, s["c_cmp"], seed=cfg.data["seed"],
                               solver_opts=opts)
        return rep.to_dict(), rep.passed
    if name == "stability":
        out = {}
        for kind in ("terminal", "driver"):
            seq = perturbation_sequence(prob.spec, grid, gammas, rule, kind, solver_opts=opts)
            out[kind] = seq.to_dict()
        return out, all(v["bounded"] and v["variation"] <= 0.25 for v in out.values())
    if name == "regularity":
        fine = grid.refined(2)
        a, _ = stitch_solve_global(prob.spec, grid, gammas, rule, **opts)
        b, _ = stitch_solve_global(prob.spec, fine, gammas, rule, **opts)
        rep = regularity_report([a, b])
        return rep.to_dict(), rep.lipschitz_stable
    if name == "contraction":
        u, plan = stitch_solve_global(prob.spec, grid, gammas, rule, **opts)
        ratios = [e["ratio"] for e in plan.picard_log if e["ratio"] is not None]
        small = max(plan.h) * prob.spec.L_declared <= 0.25
        ok = (not small) or all(r <= 0.9 for r in ratios)
        return {"plan": plan.to_dict(), "max_ratio": max(ratios, default=None), "hL_small": small}, ok
    if name == "kmono":
        u, _ = stitch_solve_global(prob.spec, grid, gammas, rule, **opts)
        sim = cfg.data["simulate"]
        rep = k_monotonicity(prob.spec, gammas, u, sim["x0"], sim["paths"], cfg.data["seed"], s["c_K"],
                             sim["increment_law"], rule)
        return rep.to_dict(), rep.passed
    if name == "forward-moments":
        dyn = prob.spec.dyn
        x0 = np.asarray(cfg.data["simulate"]["x0"], dtype=float)
        times = np.linspace(grid.t_start, grid.t_end, 51)
        lip = moment_check_initial_lipschitz(dyn, times, x0, x0 + 0.1, 2.0, gammas, 1000, cfg.data["seed"])
        T = grid.t_end - grid.t_start
        slope = moment_check_time_increment(dyn, grid.t_start, [T / 2, T / 4, T / 8, T / 16], x0, 2.0, gammas,
                                            1000, cfg.data["seed"])
        return {"lipschitz_ratio": lip.ratio, "per_policy": lip.per_policy, "time_slope": slope}, slope >= 1.0 - 0.15
    raise ConfigError(f"unknown check {name!r}")


def cmd_check(cfg: RunConfig, threads: int, names: Sequence[str]):
    diag, checks, timings = {}, {}, {}
    for name in names:
        t0 = time.perf_counter()
        diag[name], checks[name] = _check(name, cfg, threads)
        timings[name] = time.perf_counter() - t0
    return diag, timings, {}, {}, checks


def cmd_simulate(cfg: RunConfig, threads: int):
    prob = cfg.problem()
    grid = cfg.grid()
    sim = cfg.data["simulate"]
    pol = sim["policy"]
    policy = ScenarioPolicy.uniform() if pol == "uniform" else ScenarioPolicy.fixed(int(pol.split(":")[1]))
    gammas = cfg.gammas(prob)
    if policy.kind == "fixed" and policy.index >= len(gammas):
        raise ConfigError(f"policy index {policy.index} out of range ({len(gammas)} covariances)")
    t0 = time.perf_counter()
    bundle = simulate_paths(prob.spec.dyn, grid.times, sim["x0"], gammas, policy, sim["paths"], cfg.data["seed"],
                            sim["increment_law"], cfg.rule(prob))
    timings = {"simulate": time.perf_counter() - t0}
    return {"paths": bundle.M, "steps": len(bundle.times) - 1, "policy": bundle.policy}, timings, {}, {}, {}, bundle


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gbsde", description="Multi-dimensional G-BSDE solver")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--preset", help="named problem preset")
    common.add_argument("--out", type=Path, help="output directory (overrides outputs.directory)")
    common.add_argument("--seed", type=int, help="random seed (overrides config)")
    common.add_argument("--threads", type=int, help=f"worker threads (default ${THREADS_ENV} or 1)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="probabilistic solve (Picard + stitching)")
    sub.add_parser("pde", parents=[common], help="finite-difference reference solve")
    sub.add_parser("compare", parents=[common], help="cross-validate both solvers over refinements")
    chk = sub.add_parser("check", parents=[common], help="run property checks")
    chk.add_argument("names", nargs="*", metavar="CHECK",
                     help=f"any of: {', '.join(CHECK_NAMES)} (default: config 'checks')")
    sub.add_parser("simulate", parents=[common], help="simulate forward paths")
    sub.add_parser("presets", help="list preset names")
    return parser


def _threads(arg: int | None) -> int:
    if arg is not None:
        return max(1, arg)
    env = os.environ.get(THREADS_ENV)
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "presets":
        from .presets import preset_names

        print("\n".join(preset_names()))
        return EXIT_OK
    envelope = None
    out = None
    try:
        threads = _threads(args.threads)
        cfg = RunConfig.load(args.config, args.preset, args.seed)
        out = args.out or Path(cfg.data["outputs"]["directory"])
        envelope = ResultEnvelope(args.command, cfg.to_dict(), __version__)
        t0 = time.perf_counter()
        bundle = None
        if args.command == "solve":
            res = cmd_solve(cfg, threads)
        elif args.command == "pde":
            res = cmd_pde(cfg, threads)
        elif args.command == "compare":
            res = cmd_compare(cfg, threads)
        elif args.command == "check":
            unknown = [c for c in args.names if c not in CHECK_NAMES]
            if unknown:
                raise ConfigError(f"unknown checks {unknown}; known: {', '.join(CHECK_NAMES)}")
            res = cmd_check(cfg, threads, args.names or cfg.data["checks"])
        else:
            *res, bundle = cmd_simulate(cfg, threads)
        diag, timings, fields, tables, checks = res
        envelope.diagnostics, envelope.checks = diag, checks
        envelope.timings.update(timings)
        emit_tables(envelope, out, fields, tables)
        if bundle is not None:
            envelope.files["paths"] = str(write_paths_csv(bundle, out / "paths.csv"))
        envelope.timings["total"] = time.perf_counter() - t0
        try:
            envelope.write(out)
        except OSError as exc:
            raise GBSDEError(f"cannot write {out / 'result.json'}: {exc}") from exc
        print(json.dumps({"status": "ok", "result": str(out / "result.json"), "checks": checks}))
        return EXIT_OK
    except ConfigError as exc:
        print(f"gbsde: {exc}", file=sys.stderr)
        code, message = EXIT_CONFIG, str(exc)
    except GBSDEError as exc:
        print(f"gbsde: solver failure: {exc}", file=sys.stderr)
        code, message = EXIT_SOLVER, str(exc)
    if envelope is not None and out is not None:
        envelope.status, envelope.error = "error", message
        try:
            envelope.write(out)
        except OSError:
            pass
    return code


if __name__ == "__main__":
    sys.exit(main())
