"""Command line entry point: ``gbenard run|verify|converge|basis-cache``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import scipy
import scipy.fft as sfft

from . import __version__
from .config import ConfigError, RunConfig, build_basis_for, initial_state, load_config, system_for
from .fraccalc import TimeGrid, mittag_leffler
from .gdomain import g_divergence, norm_g, write_snapshot
from .goperators import BasisError, EigenSolverError, ProjectionError, build_basis, cache_key, save_basis
from .solver import apriori_bounds, coercivity_check, energy_bounds, energy_monitor, relaxation_solve, solve
from .verify import manufactured_errors, observed_orders, run_suite

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INVARIANT = 0, 2, 3, 4

log = logging.getLogger("gbenard")


def _num(x: float) -> str:
    return repr(float(x))


def write_manifest(out: Path, cfg: RunConfig, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(cfg.dumps())
    manifest = {
        "config_source": cfg.source,
        "config_sha256": cfg.digest(),
        "config": cfg.raw,
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def cmd_run(args) -> int:
    with sfft.set_workers(max(1, args.threads)):
        return _run(args)


def _run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides(initial={"seed": args.seed})
    if cfg.kind != "evolve":
        raise ConfigError(f"{cfg.source}: 'run' needs [case] kind = \"evolve\", found {cfg.kind!r}")
    out = Path(args.out)
    basis = build_basis_for(cfg)
    system = system_for(cfg, basis)
    y0, missed = initial_state(cfg, basis)
    grid = TimeGrid(cfg.t_end, cfg.n_steps)
    traj = solve(system, y0, grid)
    write_manifest(out, cfg, {"basis_key": cache_key(basis.g, basis.m), "initial_projection_loss": missed})

    bounds = energy_bounds(system.params, basis.g, system.forcing.alpha1, system.forcing.alpha2, cfg.t_end)
    energy = energy_monitor(traj, system, bounds)
    norms = traj.norms(basis)
    with open(out / "trajectory.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "u_l2", "u_h1", "theta_l2", "theta_h1", "energy_residual_u", "energy_residual_theta", "picard_iterations"])
        for k, t in enumerate(traj.times):
            w.writerow([_num(t)] + [_num(norms[c][k]) for c in ("u_l2", "u_h1", "theta_l2", "theta_h1")]
                       + [_num(energy.residual_u[k]), _num(energy.residual_theta[k]), int(traj.picard_iterations[k])])
    with open(out / "coefficients.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"u{i}" for i in range(traj.m)] + [f"theta{i}" for i in range(traj.m)])
        for t, y in zip(traj.times, traj.y):
            w.writerow([_num(t)] + [_num(v) for v in y])

    every = int(cfg.get("output", "snapshot_every", max(1, cfg.n_steps // 4)))
    snaps = out / "snapshots"
    snaps.mkdir(exist_ok=True)
    divergence = []
    for k in range(0, traj.steps + 1, every):
        u = basis.velocity(traj.f[k])
        th = basis.temperature(traj.h[k])
        write_snapshot(snaps / f"u_{k:06d}.bin", u, traj.times[k], system.params.alpha)
        write_snapshot(snaps / f"theta_{k:06d}.bin", th, traj.times[k], system.params.alpha)
        nu = norm_g(u, basis.g)
        divergence.append(float(np.abs(g_divergence(u, basis.g)).max() / nu) if nu > 0 else 0.0)

    apriori = apriori_bounds(traj, system, bounds)
    coerc = coercivity_check(traj)
    report = {
        "status": traj.status,
        "message": traj.message,
        "energy": {"max_residual_u": energy.max_u, "slack_u": energy.slack_u,
                   "max_residual_theta": energy.max_theta, "slack_theta": energy.slack_theta, "passed": energy.passed},
        "coercivity_defect": coerc,
        "apriori": {"predicted": apriori.predicted, "measured": apriori.measured, "passed": apriori.passed},
        "divergence_over_norm": divergence,
        "constants": bounds.__dict__,
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"{traj.status}: {traj.steps} steps, energy {'ok' if energy.passed else 'VIOLATED'}, "
          f"a priori {'ok' if apriori.passed else 'VIOLATED'}, max div/|u| {max(divergence):.2e}")
    if not traj.ok:
        print(traj.message, file=sys.stderr)
        return EXIT_NUMERIC
    invariants = energy.passed and apriori.passed and max(divergence) <= 1e-8 and coerc >= -energy.slack_u
    return EXIT_OK if invariants else EXIT_INVARIANT


def cmd_verify(args) -> int:
    checks = run_suite(args.suite, seed=args.seed, threads=args.threads)
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "verify.jsonl", "w") as fh:
            for c in checks:
                fh.write(c.line() + "\n")
        failed = [c for c in checks if not c.passed]
        if failed:
            with open(out / "failures.jsonl", "w") as fh:
                for c in failed:
                    fh.write(c.line() + "\n")
    width = max(len(c.name) for c in checks)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name:<{width}}  value={c.value:.4g}  threshold={c.threshold:.4g}")
    npass = sum(c.passed for c in checks)
    print(f"{npass}/{len(checks)} checks passed")
    return EXIT_OK if npass == len(checks) else EXIT_INVARIANT


def _relaxation_error(alpha: float, rate: float, t_end: float, n: int) -> float:
    grid = TimeGrid(t_end, n)
    c = relaxation_solve(alpha, rate, grid)
    return float(abs(c[-1] - mittag_leffler(alpha, -rate * t_end**alpha)))


def cmd_converge(args) -> int:
    cfg = load_config(args.config)
    if args.levels < 1:
        raise ConfigError(f"--levels must be at least 1, got {args.levels}")
    base = int(cfg.get("converge", "base_steps", 64))
    levels = [base * 2**k for k in range(args.levels)]
    if cfg.kind == "relaxation":
        alpha = float(cfg.get("physics", "alpha", 0.5))
        rate = float(cfg.get("relaxation", "rate", 1.0))
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            errors = list(pool.map(lambda n: _relaxation_error(alpha, rate, cfg.t_end, n), levels))
        result = {"levels": levels, "errors": errors, "orders": observed_orders(errors).tolist()}
    elif cfg.kind == "manufactured":
        result = manufactured_errors(tuple(levels), args.config)
    else:
        raise ConfigError(f"{cfg.source}: 'converge' needs a relaxation or manufactured case")
    with_orders = len(levels) > 1
    if args.out:
        out = Path(args.out)
        write_manifest(out, cfg)
        with open(out / "convergence.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n_steps", "error"] + (["order"] if with_orders else []))
            orders = [""] + [_num(o) for o in result["orders"]]
            for n, e, o in zip(result["levels"], result["errors"], orders):
                w.writerow([n, _num(e)] + ([o] if with_orders else []))
    print(f"{'n_steps':>8}  {'error':>12}" + ("  order" if with_orders else ""))
    for i, (n, e) in enumerate(zip(result["levels"], result["errors"])):
        o = f"  {result['orders'][i - 1]:.3f}" if i else ""
        print(f"{n:>8}  {e:12.4e}{o}")
    return EXIT_OK


def cmd_basis_cache(args) -> int:
    if args.action == "build":
        cfg = load_config(args.config)
        g = cfg.weight()
        basis = build_basis(g, cfg.m)
        d = Path(args.cache_dir)
        d.mkdir(parents=True, exist_ok=True)
        path = d / f"basis-{cache_key(g, cfg.m)}.npz"
        save_basis(basis, path)
        print(path)
        return EXIT_OK
    with np.load(args.path) as data:
        print(f"key        {data['key']}")
        print(f"weight     {data['g_name']} {data['g_params']}")
        print(f"modes      {len(data['vel_eigs'])}")
        print(f"grid       {data['vel_modes'].shape[-1]}")
        print("velocity eigenvalues / 4pi^2: " + " ".join(f"{v:.6f}" for v in data["vel_eigs"] / (4 * np.pi**2)))
        print("temperature eigenvalues / 4pi^2: " + " ".join(f"{v:.6f}" for v in data["temp_eigs"] / (4 * np.pi**2)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gbenard", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="integrate a configured case and write artifacts")
    r.add_argument("--config", required=True, help="TOML file or bundled name (decay, benard)")
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--threads", type=int, default=1)
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify", help="run a verification suite")
    v.add_argument("suite", help="fraccalc, operators, energy, convergence, uniqueness or all")
    v.add_argument("--out")
    v.add_argument("--seed", type=int)
    v.add_argument("--threads", type=int, default=1)
    v.set_defaults(func=cmd_verify)

    c = sub.add_parser("converge", help="temporal convergence study")
    c.add_argument("--config", required=True, help="TOML file or bundled name (relaxation, manufactured)")
    c.add_argument("--levels", type=int, default=5)
    c.add_argument("--out")
    c.add_argument("--threads", type=int, default=1)
    c.set_defaults(func=cmd_converge)

    b = sub.add_parser("basis-cache", help="build or inspect cached Galerkin bases")
    bsub = b.add_subparsers(dest="action", required=True)
    bb = bsub.add_parser("build")
    bb.add_argument("--config", required=True)
    bb.add_argument("--cache-dir", default=".gbenard-cache")
    bi = bsub.add_parser("inspect")
    bi.add_argument("path")
    b.set_defaults(func=cmd_basis_cache)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ProjectionError, EigenSolverError, BasisError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
