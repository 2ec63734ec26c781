"""Reference computations that share no stepping or quadrature code with the solver."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate, special

from .gdomain import grad, laplacian
from .goperators import (
    GalerkinBasis,
    _advect,
    convective_Bg,
    correction_Cg,
    correction_Ctilde,
    correction_Dtilde,
    g_flux,
    g_heat_apply,
    g_stokes_apply,
    heat_advection,
    leray_project_g,
    mean_project_g,
)
from .solver import ForcingSpec, PhysicsParams

# classical (alpha = 1) Boussinesq reference


def _tensors(basis: GalerkinBasis, params: PhysicsParams):
    m = basis.m
    R = params.xi[0] * basis.buoyancy[0] + params.xi[1] * basis.buoyancy[1]
    Auu = params.nu * (basis.S + basis.C.T)
    Att = params.kappa * (basis.St + basis.Ct)
    return m, R, Auu, Att


def classical_boussinesq_step(
    y: np.ndarray,
    basis: GalerkinBasis,
    params: PhysicsParams,
    forcing: ForcingSpec,
    t_new: float,
    dt: float,
    *,
    tol: float = 1e-13,
    max_iters: int = 30,
) -> np.ndarray:
    """One implicit Euler step of the integer-order system, solved by Newton."""
    m, R, Auu, Att = _tensors(basis, params)
    B, Bt = basis.B, basis.Bt
    F1 = forcing.velocity(t_new, m)
    F2 = forcing.temperature(t_new, m)
    f_old, h_old = y[:m], y[m:]
    f, h = f_old.copy(), h_old.copy()
    eye = np.eye(m)
    for _ in range(max_iters):
        Nf = np.einsum("ijk,i,j->k", B, f, f)
        Nh = np.einsum("ijk,i,j->k", Bt, f, h)
        G1 = (f - f_old) / dt + Auu @ f - R @ h + Nf - F1
        G2 = (h - h_old) / dt + Att @ h + Nh - F2
        J = np.zeros((2 * m, 2 * m))
        J[:m, :m] = eye / dt + Auu + (np.einsum("ajk,j->ka", B, f) + np.einsum("iak,i->ka", B, f))
        J[:m, m:] = -R
        J[m:, :m] = np.einsum("ajk,j->ka", Bt, h)
        J[m:, m:] = eye / dt + Att + np.einsum("iak,i->ka", Bt, f)
        delta = np.linalg.solve(J, -np.concatenate([G1, G2]))
        f += delta[:m]
        h += delta[m:]
        if np.max(np.abs(delta)) <= tol * max(1.0, np.max(np.abs(np.concatenate([f, h])))):
            break
    return np.concatenate([f, h])


def classical_trajectory(
    y0: np.ndarray, basis: GalerkinBasis, params: PhysicsParams, forcing: ForcingSpec, t_end: float, n_steps: int
) -> np.ndarray:
    dt = t_end / n_steps
    out = np.empty((n_steps + 1, len(y0)))
    out[0] = y0
    for k in range(1, n_steps + 1):
        out[k] = classical_boussinesq_step(out[k - 1], basis, params, forcing, k * dt, dt)
    return out


def richardson_reference(
    y0: np.ndarray, basis: GalerkinBasis, params: PhysicsParams, forcing: ForcingSpec, t_end: float, n_steps: int
) -> np.ndarray:
    """Implicit Euler on ``n_steps`` and ``2 n_steps``, extrapolated to second order.

    Returned on the coarse nodes.
    """
    coarse = classical_trajectory(y0, basis, params, forcing, t_end, n_steps)
    fine = classical_trajectory(y0, basis, params, forcing, t_end, 2 * n_steps)
    return 2.0 * fine[::2] - coarse


# manufactured solutions


def caputo_power(p: float, alpha: float, t: float) -> float:
    """Exact Caputo derivative of ``t**p``."""
    if p == 0:
        return 0.0
    return special.gamma(p + 1.0) / special.gamma(p + 1.0 - alpha) * t ** (p - alpha)


@dataclass(frozen=True, eq=False)
class ManufacturedCase:
    """``u*(x, t) = t**p U(x)``, ``theta*(x, t) = t**p Theta(x)`` inside the span."""

    basis: GalerkinBasis
    U: np.ndarray
    Theta: np.ndarray
    p: float = 2.0

    @classmethod
    def from_modes(cls, basis: GalerkinBasis, u_weights, theta_weights, p: float = 2.0) -> ManufacturedCase:
        U = basis.velocity(np.asarray(u_weights, dtype=float))
        Th = basis.temperature(np.asarray(theta_weights, dtype=float))
        return cls(basis, U, Th, p)

    def exact_fields(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        s = t**self.p
        return s * self.U, s * self.Theta

    def exact_coeffs(self, t: float) -> np.ndarray:
        u, th = self.exact_fields(t)
        return np.concatenate([self.basis.project_velocity(u)[0], self.basis.project_temperature(th)[0]])


def manufactured_fields(case: ManufacturedCase, params: PhysicsParams, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Forcing fields that make ``(u*, theta*)`` solve the weak system exactly."""
    g = case.basis.g
    a, p = params.alpha, case.p
    s, ds = t**p, caputo_power(p, a, t)
    U, Th = case.U, case.Theta
    xi = np.asarray(params.xi)[:, None, None]
    f1 = (
        ds * U
        + s * s * convective_Bg(U, U, g)
        + params.nu * s * (g_stokes_apply(U, g) + correction_Cg(U, g))
        - s * leray_project_g(xi * Th, g)
    )
    f2 = (
        ds * Th
        + s * s * heat_advection(U, Th, g)
        + params.kappa * s * (g_heat_apply(Th, g) - correction_Ctilde(Th, g) - correction_Dtilde(Th, g))
    )
    return f1, f2


def manufactured_forcing(case: ManufacturedCase, params: PhysicsParams, alpha1: float = 0.5, alpha2: float = 0.5) -> ForcingSpec:
    """Projected forcing, assembled once from the time-independent pieces."""
    basis = case.basis
    g = basis.g
    U, Th = case.U, case.Theta
    pv = lambda v: basis.project_velocity(v)[0]  # noqa: E731
    pt = lambda v: basis.project_temperature(v)[0]  # noqa: E731
    xi = np.asarray(params.xi)[:, None, None]
    u_time, u_adv = pv(U), pv(convective_Bg(U, U, g))
    u_lin = pv(g_stokes_apply(U, g) + correction_Cg(U, g))
    u_buoy = pv(leray_project_g(xi * Th, g))
    t_time, t_adv = pt(Th), pt(heat_advection(U, Th, g))
    t_lin = pt(g_heat_apply(Th, g) - correction_Ctilde(Th, g) - correction_Dtilde(Th, g))
    a, p = params.alpha, case.p

    def f1(t):
        s = t**p
        return caputo_power(p, a, t) * u_time + s * s * u_adv + params.nu * s * u_lin - s * u_buoy

    def f2(t):
        s = t**p
        return caputo_power(p, a, t) * t_time + s * s * t_adv + params.kappa * s * t_lin

    return ForcingSpec(f1, f2, alpha1, alpha2)


def strong_residual(case: ManufacturedCase, params: PhysicsParams, t: float) -> tuple[float, float]:
    """Residual of the strong equations using plain Laplacians and expanded corrections.

    Uses ``A_g + C_g = P_g(-Delta)`` and the expanded heat operator
    ``-Delta - (2/g) grad g . grad - (Delta g / g)``, so it checks the weak-form
    operators through a different route. Returns g-norms of both residuals.
    """
    g = case.basis.g
    grid = g.grid
    f1, f2 = manufactured_fields(case, params, t)
    a, p = params.alpha, case.p
    s, ds = t**p, caputo_power(p, a, t)
    U, Th = case.U, case.Theta
    xi = np.asarray(params.xi)[:, None, None]
    adv_u = _advect(g_flux(U, g), U, grid) / g.samples
    r1 = leray_project_g(ds * U + s * s * adv_u - params.nu * s * laplacian(U, grid) - s * xi * Th - f1, g)
    adv_t = _advect(g_flux(U, g), Th, grid) / g.samples
    dg = grad(g.samples, grid)
    lap_g = laplacian(g.samples, grid)
    heat = -laplacian(Th, grid) - 2.0 * np.sum(dg * grad(Th, grid), axis=0) / g.samples - lap_g * Th / g.samples
    r2 = mean_project_g(ds * Th + s * s * adv_t + params.kappa * s * heat - f2, g)
    n2 = grid.n**2
    return (
        float(np.sqrt(np.sum(r1 * r1 * g.samples) / n2)),
        float(np.sqrt(np.sum(r2 * r2 * g.samples) / n2)),
    )


# definition-level fractional calculus


def definition_quadrature(
    f: Callable[[float], float],
    alpha: float,
    t: float,
    which: str = "integral",
    *,
    fprime: Callable[[float], float] | None = None,
    t_end: float | None = None,
) -> float:
    """Fractional integral or Caputo derivative from its defining integral.

    ``which='integral'`` gives the left integral of order ``alpha``,
    ``which='right_integral'`` the right integral on ``(t, t_end)`` and
    ``which='caputo'`` the Caputo derivative (needs ``fprime``). The kernel
    singularity is handled by the algebraic weight in ``scipy.integrate.quad``.
    """
    if which == "integral":
        if t == 0:
            return 0.0
        val, _ = integrate.quad(f, 0.0, t, weight="alg", wvar=(0.0, alpha - 1.0), limit=200)
        return val / special.gamma(alpha)
    if which == "right_integral":
        if t_end is None:
            raise ValueError("right_integral needs t_end")
        if t == t_end:
            return 0.0
        val, _ = integrate.quad(f, t, t_end, weight="alg", wvar=(alpha - 1.0, 0.0), limit=200)
        return val / special.gamma(alpha)
    if which == "caputo":
        if fprime is None:
            raise ValueError("caputo needs fprime")
        if alpha == 1.0:
            return fprime(t)
        if t == 0:
            return 0.0
        val, _ = integrate.quad(fprime, 0.0, t, weight="alg", wvar=(0.0, -alpha), limit=200)
        return val / special.gamma(1.0 - alpha)
    raise ValueError(f"unknown quantity {which!r}")
