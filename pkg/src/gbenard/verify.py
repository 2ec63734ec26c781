"""Named verification suites used by ``gbenard verify``."""

from __future__ import annotations

import inspect
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable

import numpy as np

from . import fraccalc as fc
from .config import build_basis_for, initial_state, load_config, system_for
from .gdomain import Grid2, dealias, g_divergence, make_gweight, norm_g
from .goperators import (
    build_basis,
    correction_Cg,
    correction_Ctilde,
    g_stokes_apply,
    leray_project_g,
    trilinear_bg,
    trilinear_bg_scalar,
)
from .oracles import (
    ManufacturedCase,
    classical_trajectory,
    manufactured_forcing,
    richardson_reference,
)
from .solver import (
    ForcingSpec,
    PhysicsParams,
    apriori_bounds,
    assemble,
    coercivity_check,
    energy_bounds,
    energy_monitor,
    relaxation_solve,
    solve,
    uniqueness_probe,
)


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    threshold: float
    details: dict[str, Any] = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, default=float)


def observed_orders(errors) -> np.ndarray:
    e = np.asarray(errors, dtype=float)
    return np.log2(e[:-1] / e[1:])


# fractional calculus


def power_rule_orders(alpha: float, levels=range(6, 13)) -> tuple[np.ndarray, np.ndarray]:
    """Max nodal error of the plain L1 derivative of ``t^2`` on ``dt = 2^-k``."""
    errs = []
    for k in levels:
        grid = fc.TimeGrid(1.0, 2**k)
        t = grid.nodes
        d = fc.caputo_derivative(fc.SampledSignal(grid, t**2), alpha).values
        exact = 2.0 * t ** (2.0 - alpha) / fc.gamma(3.0 - alpha)
        errs.append(np.max(np.abs(d[1:] - exact[1:])))
    return np.array(errs), observed_orders(errs)


def relaxation_error(alpha: float, n_steps: int = 2048, rate: float = 1.0, t_end: float = 1.0) -> float:
    grid = fc.TimeGrid(t_end, n_steps)
    c = relaxation_solve(alpha, rate, grid)
    exact = np.array([fc.mittag_leffler(alpha, -rate * t**alpha) for t in grid.nodes])
    return float(np.max(np.abs(c - exact) / np.abs(exact)))


def ibp_pair(n_steps: int, alpha: float = 0.5):
    """``u = t^2`` and a smooth bump ``psi`` vanishing near ``T = 1``."""
    grid = fc.TimeGrid(1.0, n_steps)
    t = grid.nodes
    r = np.clip((t - 0.4) / 0.3, -1.0, 1.0)
    psi = np.where(np.abs(r) < 1.0, np.exp(-1.0 / np.maximum(1.0 - r * r, 1e-300)), 0.0)
    return fc.SampledSignal(grid, t**2), fc.SampledSignal(grid, psi)


def ibp_residuals(alpha: float = 0.5, levels=(512, 1024, 2048, 4096)) -> list[float]:
    return [fc.frac_ibp_residual(*ibp_pair(n, alpha), alpha) for n in levels]


def suite_fraccalc() -> list[Check]:
    out = []
    for a in (0.3, 0.5, 0.8):
        t0 = time.perf_counter()
        errs, orders = power_rule_orders(a)
        out.append(Check(f"power_rule_order[alpha={a}]", bool(orders.min() >= 2 - a - 0.15), float(orders.min()), 2 - a - 0.15, {"errors": errs.tolist()}, time.perf_counter() - t0))
    for a in (0.4, 0.7):
        t0 = time.perf_counter()
        e = relaxation_error(a)
        out.append(Check(f"relaxation[alpha={a}]", e <= 1e-3, e, 1e-3, {}, time.perf_counter() - t0))
    t0 = time.perf_counter()
    res = ibp_residuals()
    mono = all(b < a for a, b in zip(res, res[1:]))
    out.append(Check("integration_by_parts", mono and res[-1] <= 1e-3, res[-1], 1e-3, {"residuals": res}, time.perf_counter() - t0))
    grid = fc.TimeGrid(1.0, 64)
    d = fc.caputo_derivative(fc.SampledSignal(grid, np.full(65, 3.0)), 0.5).values
    out.append(Check("annihilates_constants", float(np.abs(d).max()) == 0.0, float(np.abs(d).max()), 0.0))
    return out


# operators


def random_solenoidal(g, rng, count: int) -> np.ndarray:
    n = g.grid.n
    v = dealias(rng.standard_normal((count, 2, n, n)), g.grid)
    return leray_project_g(v, g)


def trilinear_defects(count: int = 100, n: int = 64, seed: int = 0) -> dict[str, float]:
    """Worst relative skew and self-term defects over random fields."""
    grid = Grid2(n)
    g = make_gweight("sinusoidal", grid, amplitude=0.2)
    rng = np.random.default_rng(seed)
    U = random_solenoidal(g, rng, count)
    V = dealias(rng.standard_normal((count, 2, n, n)), grid)
    W = dealias(rng.standard_normal((count, 2, n, n)), grid)
    th = dealias(rng.standard_normal((count, n, n)), grid)
    ta = dealias(rng.standard_normal((count, n, n)), grid)
    worst = dict.fromkeys(("skew", "self", "skew_scalar", "self_scalar"), 0.0)
    for i in range(count):
        u, v, w, a, b = U[i], V[i], W[i], th[i], ta[i]
        scale = np.sqrt(np.mean((g.samples * u) ** 2))
        sv = scale * np.sqrt(np.mean(v * v)) * np.sqrt(np.mean(w * w)) * 2 * np.pi * n / 3
        sa = scale * np.sqrt(np.mean(a * a)) * np.sqrt(np.mean(b * b)) * 2 * np.pi * n / 3
        worst["skew"] = max(worst["skew"], abs(trilinear_bg(u, v, w, g) + trilinear_bg(u, w, v, g)) / sv)
        worst["self"] = max(worst["self"], abs(trilinear_bg(u, v, v, g)) / (scale * np.mean(v * v) * 2 * np.pi * n / 3))
        worst["skew_scalar"] = max(worst["skew_scalar"], abs(trilinear_bg_scalar(u, a, b, g) + trilinear_bg_scalar(u, b, a, g)) / sa)
        worst["self_scalar"] = max(worst["self_scalar"], abs(trilinear_bg_scalar(u, a, a, g)) / (scale * np.mean(a * a) * 2 * np.pi * n / 3))
    return worst


def degeneration_defects(n: int = 32, seed: int = 0) -> dict[str, float]:
    grid = Grid2(n)
    g = make_gweight("constant", grid)
    rng = np.random.default_rng(seed)
    u = random_solenoidal(g, rng, 1)[0]
    th = dealias(rng.standard_normal((n, n)), grid)
    x, y = grid.mesh
    worst_mode = 0.0
    for k in [(1, 0), (1, 2), (3, -1), (2, 2)]:
        ph = 2 * np.pi * (k[0] * x + k[1] * y)
        mode = np.stack([k[1] * np.sin(ph), -k[0] * np.sin(ph)])
        lam = 4 * np.pi**2 * (k[0] ** 2 + k[1] ** 2)
        worst_mode = max(worst_mode, float(np.abs(g_stokes_apply(mode, g) - lam * mode).max() / lam))
    return {
        "C": float(np.abs(correction_Cg(u, g)).max()),
        "Ct": float(np.abs(correction_Ctilde(th, g)).max()),
        "stokes_mode": worst_mode,
    }


def spectrum_checks(n: int = 64, m: int = 16) -> dict[str, float]:
    grid = Grid2(n)
    flat = build_basis(make_gweight("constant", grid), m)
    g = make_gweight("sinusoidal", grid, amplitude=0.2)
    curved = build_basis(g, m)
    lower = 4 * np.pi**2 * g.m0 / g.M0
    return {
        "flat_rel_error": float(abs(flat.vel_eigs[0] - 4 * np.pi**2) / (4 * np.pi**2)),
        "curved_lambda1": float(curved.vel_eigs[0]),
        "curved_margin": float(curved.vel_eigs[0] - lower),
        "lower_bound": float(lower),
    }


def suite_operators(seed: int = 0) -> list[Check]:
    out = []
    t0 = time.perf_counter()
    d = trilinear_defects(seed=seed)
    dt = time.perf_counter() - t0
    for k, v in d.items():
        out.append(Check(f"trilinear_{k}", v <= 1e-8, v, 1e-8, {}, dt))
    t0 = time.perf_counter()
    s = spectrum_checks()
    dt = time.perf_counter() - t0
    out.append(Check("spectrum_flat", s["flat_rel_error"] <= 1e-6, s["flat_rel_error"], 1e-6, {}, dt))
    out.append(Check("spectrum_lower_bound", s["curved_margin"] > 0, s["curved_margin"], 0.0, s, dt))
    dg = degeneration_defects(seed=seed)
    out.append(Check("degenerate_corrections", max(dg["C"], dg["Ct"]) <= 1e-10, max(dg["C"], dg["Ct"]), 1e-10, dg))
    out.append(Check("degenerate_stokes_modes", dg["stokes_mode"] <= 1e-8, dg["stokes_mode"], 1e-8, dg))
    return out


# battery runs


@dataclass
class BatteryRun:
    name: str
    report: dict[str, Any]


def battery_run(name: str, **overrides) -> dict[str, Any]:
    """Run a bundled evolve config and collect every invariant."""
    cfg = load_config(name)
    if overrides:
        cfg = cfg.with_overrides(**overrides)
    basis = build_basis_for(cfg)
    system = system_for(cfg, basis)
    y0, missed = initial_state(cfg, basis)
    grid = fc.TimeGrid(cfg.t_end, cfg.n_steps)
    traj = solve(system, y0, grid)
    bounds = energy_bounds(system.params, basis.g, system.forcing.alpha1, system.forcing.alpha2, cfg.t_end)
    energy = energy_monitor(traj, system, bounds)
    apriori = apriori_bounds(traj, system, bounds)
    every = int(cfg.get("output", "snapshot_every", max(1, cfg.n_steps // 4)))
    div = []
    for k in range(0, traj.steps + 1, every):
        u = basis.velocity(traj.f[k])
        nu = norm_g(u, basis.g)
        div.append(float(np.abs(g_divergence(u, basis.g)).max() / nu) if nu > 0 else 0.0)
    norms = traj.norms(basis)
    return {
        "status": traj.status,
        "traj": traj,
        "basis": basis,
        "system": system,
        "bounds": bounds,
        "energy": energy,
        "apriori": apriori,
        "coercivity": coercivity_check(traj),
        "divergence": div,
        "u_increase": float(np.diff(norms["u_l2"]).max()),
        "theta_increase": float(np.diff(norms["theta_l2"]).max()),
        "zero_forcing": system.forcing.is_zero,
        "missed": missed,
    }


def suite_energy(names=("decay", "benard"), **overrides) -> list[Check]:
    out = []
    for name in names:
        t0 = time.perf_counter()
        r = battery_run(name, **overrides)
        dt = time.perf_counter() - t0
        e = r["energy"]
        out.append(Check(f"{name}:status", r["status"] == "ok", 0.0, 0.0, {"message": r["traj"].message}, dt))
        out.append(Check(f"{name}:energy_u", e.max_u <= e.slack_u, e.max_u, e.slack_u, {}, dt))
        out.append(Check(f"{name}:energy_theta", e.max_theta <= e.slack_theta, e.max_theta, e.slack_theta, {}, dt))
        out.append(Check(f"{name}:coercivity", r["coercivity"] >= -e.slack_u, r["coercivity"], -e.slack_u))
        a = r["apriori"]
        out.append(Check(f"{name}:apriori", a.passed, min(a.margins.values()), 0.0, {"margins": a.margins}))
        out.append(Check(f"{name}:divergence", max(r["divergence"]) <= 1e-8, max(r["divergence"]), 1e-8))
        if r["zero_forcing"]:
            inc = max(r["u_increase"], r["theta_increase"])
            out.append(Check(f"{name}:monotone_decay", inc <= 1e-9, inc, 1e-9))
    return out


# convergence


def manufactured_case_for(cfg_name: str = "manufactured"):
    cfg = load_config(cfg_name)
    basis = build_basis_for(cfg)
    params = cfg.physics()
    rng = np.random.default_rng(int(cfg.get("manufactured", "seed", 1)))
    amp = float(cfg.get("manufactured", "amplitude", 0.5))
    case = ManufacturedCase.from_modes(
        basis, amp * rng.standard_normal(basis.m), amp * rng.standard_normal(basis.m), float(cfg.get("manufactured", "power", 2.0))
    )
    return cfg, case, params


def manufactured_errors(levels=(64, 128, 256, 512, 1024), cfg_name: str = "manufactured") -> dict[str, Any]:
    cfg, case, params = manufactured_case_for(cfg_name)
    system = assemble(case.basis, params, manufactured_forcing(case, params))
    exact = case.exact_coeffs(cfg.t_end)
    errs = []
    for n in levels:
        traj = solve(system, np.zeros(system.dim), fc.TimeGrid(cfg.t_end, n))
        if not traj.ok:
            raise RuntimeError(traj.message)
        # modes are g-orthonormal, so the coefficient distance is the g-norm error
        errs.append(float(np.linalg.norm(traj.f[-1] - exact[: case.basis.m])))
    return {"levels": list(levels), "errors": errs, "orders": observed_orders(errs).tolist()}


def classical_limit(levels=(32, 64, 128, 256, 512), n: int = 32, m: int = 8, seed: int = 3) -> dict[str, Any]:
    """alpha = 1 solver against the Newton implicit-Euler reference."""
    grid = Grid2(n)
    g = make_gweight("sinusoidal", grid, amplitude=0.2)
    basis = build_basis(g, m)
    params = PhysicsParams(nu=0.1, kappa=0.1, alpha=1.0, xi=(0.0, 1.0))
    forcing = ForcingSpec.from_fields(basis, None, np.sin(2 * np.pi * grid.mesh[1]), alpha1=0.5, alpha2=0.5)
    system = assemble(basis, params, forcing)
    y0 = 0.3 * np.random.default_rng(seed).standard_normal(system.dim)
    ref_steps = 8 * levels[-1]
    ref = richardson_reference(y0, basis, params, forcing, 1.0, ref_steps)
    diffs, same = [], []
    for N in levels:
        traj = solve(system, y0, fc.TimeGrid(1.0, N))
        stride = ref_steps // N
        diffs.append(float(np.abs(traj.y - ref[::stride]).max()))
        same.append(float(np.abs(traj.y - classical_trajectory(y0, basis, params, forcing, 1.0, N)).max()))
    return {"levels": list(levels), "differences": diffs, "orders": observed_orders(diffs).tolist(), "same_dt": same}


def relaxation_orders(alpha: float, levels=(64, 128, 256, 512, 1024), rate: float = 1.0) -> dict[str, Any]:
    """Final-time error of the scalar relaxation against the Mittag-Leffler solution."""
    exact = fc.mittag_leffler(alpha, -rate)
    errs = [abs(relaxation_solve(alpha, rate, fc.TimeGrid(1.0, n))[-1] - exact) for n in levels]
    return {"levels": list(levels), "errors": errs, "orders": observed_orders(errs).tolist()}


def suite_convergence() -> list[Check]:
    out = []
    table = {a: relaxation_orders(a) for a in (0.3, 0.5, 0.8, 1.0)}
    for a, want in ((0.5, 1.35), (1.0, 0.9)):
        o = min(table[a]["orders"])
        out.append(Check(f"relaxation_order[alpha={a}]", o >= want, o, want, {"table": {str(k): v["orders"] for k, v in table.items()}}))
    t0 = time.perf_counter()
    r = manufactured_errors()
    dt = time.perf_counter() - t0
    out.append(Check("manufactured_order", min(r["orders"]) >= 1.35, min(r["orders"]), 1.35, r, dt))
    out.append(Check("manufactured_final_error", r["errors"][-1] <= 1e-4, r["errors"][-1], 1e-4, r, dt))
    t0 = time.perf_counter()
    c = classical_limit()
    dt = time.perf_counter() - t0
    out.append(Check("classical_limit_order", min(c["orders"]) >= 0.9, min(c["orders"]), 0.9, c, dt))
    out.append(Check("classical_same_step", max(c["same_dt"]) <= 1e-9, max(c["same_dt"]), 1e-9, c, dt))
    return out


def suite_uniqueness(seed: int = 0) -> list[Check]:
    cfg = load_config("benard")
    basis = build_basis_for(cfg)
    system = system_for(cfg, basis)
    y0, _ = initial_state(cfg, basis)
    grid = fc.TimeGrid(cfg.t_end, cfg.n_steps)
    same = uniqueness_probe(system, y0, grid, 0.0)
    pert = uniqueness_probe(system, y0, grid, 1e-8, seed=seed)
    ratio = float(np.max(pert.divergence[1:] / pert.envelope[1:]))
    return [
        Check("bitwise_determinism", same.identical, 0.0, 0.0),
        Check("gronwall_envelope", pert.passed, ratio, 1.0),
    ]


SUITES: dict[str, Callable[[], list[Check]]] = {
    "fraccalc": suite_fraccalc,
    "operators": suite_operators,
    "energy": suite_energy,
    "convergence": suite_convergence,
    "uniqueness": suite_uniqueness,
}


def _call(fn: Callable[..., list[Check]], seed: int | None) -> list[Check]:
    if seed is not None and "seed" in inspect.signature(fn).parameters:
        return fn(seed=seed)
    return fn()


def run_suite(name: str, *, seed: int | None = None, threads: int = 1) -> list[Check]:
    """Run one suite, or every suite for ``'all'`` (on ``threads`` workers)."""
    if name == "all":
        with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
            results = list(pool.map(lambda fn: _call(fn, seed), SUITES.values()))
        return [c for r in results for c in r]
    try:
        fn = SUITES[name]
    except KeyError:
        raise ValueError(f"unknown suite {name!r}; choose from {sorted(SUITES) + ['all']}") from None
    return _call(fn, seed)
