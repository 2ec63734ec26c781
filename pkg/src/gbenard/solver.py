"""Time-fractional Galerkin system: assembly, L1 stepping and energy monitors.

The unknown is ``y = (f, h)``: velocity coefficients ``f`` and temperature
coefficients ``h`` in a :class:`~gbenard.goperators.GalerkinBasis`. The
semi-discrete system reads

    D^alpha y + L y + N(y) = F(t),

with ``L`` collecting viscosity, diffusion, the weight corrections and
buoyancy, and ``N`` the quadratic advection terms.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla

from .fraccalc import (
    FracOrder,
    SampledSignal,
    TimeGrid,
    caputo_derivative,
    frac_gronwall_bound,
    gamma,
    l1_coefficients,
    singular_exponents,
    starting_weights,
)
from .gdomain import GWeight
from .goperators import GalerkinBasis

log = logging.getLogger(__name__)


class NumericalError(ArithmeticError):
    pass


class PicardError(NumericalError):
    def __init__(self, step: int, increments: Sequence[float]):
        self.step = step
        self.increments = list(increments)
        super().__init__(
            f"Picard iteration failed at step {step}; last increments "
            + ", ".join(f"{x:.3g}" for x in self.increments[-3:])
        )


@dataclass(frozen=True)
class PhysicsParams:
    nu: float
    kappa: float
    alpha: float = 1.0
    xi: tuple[float, float] = (0.0, 1.0)
    inviscid: bool = False

    def __post_init__(self) -> None:
        FracOrder(self.alpha)
        if len(self.xi) != 2:
            raise ValueError("xi must have two components")
        object.__setattr__(self, "xi", (float(self.xi[0]), float(self.xi[1])))
        if not self.inviscid and not (self.nu > 0 and self.kappa > 0):
            raise ValueError(f"nu and kappa must be positive, got nu={self.nu}, kappa={self.kappa}")
        if self.inviscid and (self.nu < 0 or self.kappa < 0):
            raise ValueError("nu and kappa cannot be negative")

    @property
    def xi_sup(self) -> float:
        return float(np.hypot(*self.xi))


Profile = Callable[[float], np.ndarray]


@dataclass(frozen=True)
class ForcingSpec:
    """Projected forcing ``F1(t) = (f1, w_k)_g`` and ``F2(t) = (f2, t_k)_g``.

    ``alpha1``/``alpha2`` are the integrability orders entering the energy
    constants; ``f1 in L^{2/alpha1}(0, T; V')``.
    """

    f1: Profile | None = None
    f2: Profile | None = None
    alpha1: float = 0.5
    alpha2: float = 0.5

    def __post_init__(self) -> None:
        for a in (self.alpha1, self.alpha2):
            if not 0.0 < a < 1.0:
                raise ValueError(f"forcing integrability orders must lie in (0, 1), got {a}")

    @property
    def is_zero(self) -> bool:
        return self.f1 is None and self.f2 is None

    def velocity(self, t: float, m: int) -> np.ndarray:
        return np.zeros(m) if self.f1 is None else np.asarray(self.f1(t), dtype=float)

    def temperature(self, t: float, m: int) -> np.ndarray:
        return np.zeros(m) if self.f2 is None else np.asarray(self.f2(t), dtype=float)

    @classmethod
    def from_fields(
        cls,
        basis: GalerkinBasis,
        velocity_field: np.ndarray | None = None,
        temperature_field: np.ndarray | None = None,
        profile: Callable[[float], float] = lambda t: 1.0,
        alpha1: float = 0.5,
        alpha2: float = 0.5,
    ) -> ForcingSpec:
        """Fixed spatial fields times a scalar time profile."""
        f1 = f2 = None
        if velocity_field is not None:
            c1 = basis.project_velocity(velocity_field)[0]
            f1 = lambda t: profile(t) * c1  # noqa: E731
        if temperature_field is not None:
            c2 = basis.project_temperature(temperature_field)[0]
            f2 = lambda t: profile(t) * c2  # noqa: E731
        return cls(f1, f2, alpha1, alpha2)


@dataclass(frozen=True, eq=False)
class GalerkinSystem:
    basis: GalerkinBasis
    params: PhysicsParams
    forcing: ForcingSpec
    L: np.ndarray = field(repr=False)

    @property
    def m(self) -> int:
        return self.basis.m

    @property
    def dim(self) -> int:
        return 2 * self.basis.m

    def split(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        m = self.m
        return y[..., :m], y[..., m:]

    def nonlinear(self, y: np.ndarray) -> np.ndarray:
        f, h = self.split(y)
        b = self.basis
        return np.concatenate(
            [np.einsum("ijk,i,j->k", b.B, f, f), np.einsum("ijk,i,j->k", b.Bt, f, h)]
        )

    def forcing_vector(self, t: float) -> np.ndarray:
        m = self.m
        return np.concatenate([self.forcing.velocity(t, m), self.forcing.temperature(t, m)])

    def rhs(self, y: np.ndarray, t: float) -> np.ndarray:
        """``F(t) - L y - N(y)``, i.e. the value of ``D^alpha y``."""
        return self.forcing_vector(t) - self.L @ y - self.nonlinear(y)

    def jacobian(self, y: np.ndarray) -> np.ndarray:
        """Derivative of ``N`` at ``y``; ``N(y1) - N(y2) = J((y1 + y2) / 2) (y1 - y2)``."""
        f, h = self.split(y)
        b = self.basis
        m = self.m
        J = np.zeros((2 * m, 2 * m))
        J[:m, :m] = np.einsum("ajk,j->ka", b.B, f) + np.einsum("iak,i->ka", b.B, f)
        J[m:, :m] = np.einsum("ajk,j->ka", b.Bt, h)
        J[m:, m:] = np.einsum("iak,i->ka", b.Bt, f)
        return J

    def bilinear_norm(self) -> float:
        """Frobenius norm of the quadratic map ``y -> N(y)``."""
        b = self.basis
        return float(np.sqrt(np.sum(b.B**2) + np.sum(b.Bt**2)))


def assemble(basis: GalerkinBasis, params: PhysicsParams, forcing: ForcingSpec | None = None) -> GalerkinSystem:
    m = basis.m
    R = basis.coupling(params.xi)
    L = np.zeros((2 * m, 2 * m))
    L[:m, :m] = params.nu * (basis.S + basis.C.T)
    L[:m, m:] = -R
    L[m:, m:] = params.kappa * (basis.St + basis.Ct)
    return GalerkinSystem(basis, params, forcing or ForcingSpec(), L)


class CaputoHistory:
    """Stored solution values and the corrected L1 memory sum.

    The discrete derivative at node ``n`` is ``lead(n) * y_n + known(n)``,
    where ``known`` only involves earlier nodes.
    """

    def __init__(self, alpha: float, dt: float, n_steps: int, dim: int, *, corrected: bool = True):
        self.alpha = FracOrder(alpha)
        self.dt = dt
        self.n_steps = n_steps
        self.exponents = singular_exponents(self.alpha) if corrected else ()
        self.exponents = self.exponents[: n_steps]
        self.b = l1_coefficients(self.alpha, n_steps + 1)
        self.c = dt ** (-self.alpha) / gamma(2.0 - self.alpha)
        self.W = starting_weights(self.alpha, n_steps, self.exponents) * dt ** (-self.alpha)
        self.values = np.zeros((n_steps + 1, dim))
        self.count = 0

    @property
    def s(self) -> int:
        return len(self.exponents)

    def push(self, y: np.ndarray) -> None:
        if self.count > self.n_steps:
            raise IndexError("history is full")
        self.values[self.count] = y
        self.count += 1

    def lead(self, n: int) -> float:
        return self.c + (self.W[n, n - 1] if n <= self.s else 0.0)

    def known(self, n: int) -> np.ndarray:
        if n != self.count:
            raise ValueError(f"history holds {self.count} values, cannot form node {n}")
        Y = self.values
        out = -self.c * Y[n - 1]
        if n > 1:
            dY = np.diff(Y[:n], axis=0)  # dY[i] = y_{i+1} - y_i
            out = out + self.c * (self.b[1:n] @ dY[n - 2 :: -1])
        s = self.s
        if s:
            q = min(s, n - 1)
            if q:
                out = out + self.W[n, :q] @ (Y[1 : q + 1] - Y[0])
            if n <= s:
                out = out - self.W[n, n - 1] * Y[0]
        return out


@dataclass
class SolverState:
    index: int
    time: float
    y: np.ndarray
    history: CaputoHistory
    picard_iterations: int = 0


class Stepper:
    """Implicit L1 stepper: linear part solved exactly, advection by Picard."""

    def __init__(
        self,
        system: GalerkinSystem,
        grid: TimeGrid,
        *,
        picard_tol: float = 1e-10,
        max_picard: int = 25,
        corrected: bool = True,
    ):
        self.system = system
        self.grid = grid
        self.picard_tol = picard_tol
        self.max_picard = max_picard
        self.corrected = corrected
        self._lu: dict[float, tuple] = {}

    def start(self, y0: np.ndarray) -> SolverState:
        y0 = np.asarray(y0, dtype=float)
        if y0.shape != (self.system.dim,):
            raise ValueError(f"initial state must have shape ({self.system.dim},), got {y0.shape}")
        hist = CaputoHistory(
            self.system.params.alpha, self.grid.dt, self.grid.n_steps, self.system.dim, corrected=self.corrected
        )
        hist.push(y0)
        return SolverState(0, 0.0, y0.copy(), hist)

    def _factor(self, lead: float):
        lu = self._lu.get(lead)
        if lu is None:
            lu = sla.lu_factor(lead * np.eye(self.system.dim) + self.system.L)
            self._lu[lead] = lu
        return lu

    def step(self, state: SolverState) -> SolverState:
        sys_ = self.system
        hist = state.history
        n = state.index + 1
        t = n * self.grid.dt
        lu = self._factor(hist.lead(n))
        base = sys_.forcing_vector(t) - hist.known(n)
        y = state.y.copy()
        increments = []
        for it in range(1, self.max_picard + 1):
            y_new = sla.lu_solve(lu, base - sys_.nonlinear(y))
            if not np.all(np.isfinite(y_new)):
                raise PicardError(n, increments + [np.inf])
            inc = float(np.max(np.abs(y_new - y)))
            increments.append(inc)
            y = y_new
            if inc <= self.picard_tol * max(1.0, float(np.max(np.abs(y)))):
                break
        else:
            raise PicardError(n, increments)
        hist.push(y)
        return SolverState(n, t, y, hist, it)


def relaxation_solve(alpha: float, rate: float, grid: TimeGrid, *, corrected: bool = True) -> np.ndarray:
    """Scalar ``D^alpha c = -rate * c`` with ``c(0) = 1``, same scheme as :class:`Stepper`."""
    hist = CaputoHistory(alpha, grid.dt, grid.n_steps, 1, corrected=corrected)
    hist.push(np.ones(1))
    for n in range(1, grid.n_steps + 1):
        hist.push(-hist.known(n) / (hist.lead(n) + rate))
    return hist.values[:, 0].copy()


def step(state: SolverState, stepper: Stepper) -> SolverState:
    return stepper.step(state)


@dataclass
class Trajectory:
    grid: TimeGrid
    m: int
    y: np.ndarray
    forcing: np.ndarray
    picard_iterations: np.ndarray
    exponents: tuple[float, ...]
    alpha: float
    status: str = "ok"
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def steps(self) -> int:
        return len(self.y) - 1

    @property
    def times(self) -> np.ndarray:
        return self.grid.nodes[: len(self.y)]

    @property
    def f(self) -> np.ndarray:
        return self.y[:, : self.m]

    @property
    def h(self) -> np.ndarray:
        return self.y[:, self.m :]

    def norms(self, basis: GalerkinBasis) -> dict[str, np.ndarray]:
        f, h = self.f, self.h
        return {
            "u_l2": np.sqrt(np.sum(f * f, axis=1)),
            "u_h1": np.sqrt(np.maximum(np.einsum("ni,ij,nj->n", f, basis.S, f), 0.0)),
            "theta_l2": np.sqrt(np.sum(h * h, axis=1)),
            "theta_h1": np.sqrt(np.maximum(np.einsum("ni,ij,nj->n", h, basis.St, h), 0.0)),
        }


def solve(
    system: GalerkinSystem,
    y0: np.ndarray,
    grid: TimeGrid,
    *,
    picard_tol: float = 1e-10,
    max_picard: int = 25,
    corrected: bool = True,
) -> Trajectory:
    """Integrate from ``y0`` over ``grid``.

    A Picard failure truncates the trajectory and sets ``status='failed'``.
    """
    stepper = Stepper(system, grid, picard_tol=picard_tol, max_picard=max_picard, corrected=corrected)
    state = stepper.start(y0)
    N = grid.n_steps
    Y = np.empty((N + 1, system.dim))
    Y[0] = state.y
    iters = np.zeros(N + 1, dtype=int)
    status, message = "ok", ""
    last = 0
    for n in range(1, N + 1):
        try:
            state = stepper.step(state)
        except PicardError as exc:
            status, message = "failed", str(exc)
            log.warning("%s", exc)
            break
        Y[n] = state.y
        iters[n] = state.picard_iterations
        last = n
    nodes = grid.nodes[: last + 1]
    F = np.array([system.forcing_vector(t) for t in nodes])
    return Trajectory(
        grid, system.m, Y[: last + 1], F, iters[: last + 1], state.history.exponents, system.params.alpha, status, message
    )


# energy constants and monitors


@dataclass(frozen=True)
class EnergyBounds:
    nu_prime: float
    kappa_prime: float
    c_prime: float
    b1: float
    b2: float
    C1: float
    C2: float


def energy_bounds(params: PhysicsParams, g: GWeight, alpha1: float, alpha2: float, t_end: float) -> EnergyBounds:
    alpha = params.alpha
    m0, M0, G = g.m0, g.M0, g.grad_sup
    shrink = 1.0 - M0 * G**2 / (2.0 * np.pi**2 * m0**3)
    nu_p = params.nu * shrink
    kappa_p = params.kappa * shrink
    c_p = M0**2 * params.xi_sup**2 / (4.0 * np.pi**4 * m0**2)
    b1 = (alpha - 1.0) / (1.0 - alpha1)
    b2 = (alpha - 1.0) / (1.0 - alpha2)
    if 1.0 + b1 <= 0.0 or 1.0 + b2 <= 0.0:
        raise ValueError(
            f"forcing orders must be below alpha for the time integrals to converge "
            f"(alpha={alpha}, alpha1={alpha1}, alpha2={alpha2})"
        )
    ga = gamma(alpha)
    C2 = 2.0 * t_end ** (1.0 + b2) / (params.kappa * (1.0 + b2) * ga)
    C1 = c_p / (params.nu * kappa_p) * C2 + 4.0 * t_end ** (1.0 + b1) / (params.nu * (1.0 + b1) * ga)
    return EnergyBounds(nu_p, kappa_p, c_p, b1, b2, C1, C2)


def dual_norms(F: np.ndarray, stiffness: np.ndarray) -> np.ndarray:
    """``sup_v (F, v) / ||v||`` over the span, for each row of ``F``."""
    X = np.linalg.solve(stiffness, F.T)
    return np.sqrt(np.maximum(np.sum(F.T * X, axis=0), 0.0))


def _caputo(traj: Trajectory, values: np.ndarray) -> np.ndarray:
    grid = TimeGrid(traj.times[-1] if traj.steps else traj.grid.t_end, max(traj.steps, 1))
    if traj.steps == 0:
        return np.zeros_like(values)
    grid = TimeGrid(traj.grid.dt * traj.steps, traj.steps)
    return caputo_derivative(SampledSignal(grid, values), traj.alpha, traj.exponents[: traj.steps]).values


def slack_tolerance(dt: float, alpha: float, scale: float) -> float:
    return max(1e-6, 5.0 * dt ** (2.0 - alpha) * scale)


@dataclass(frozen=True)
class EnergyReport:
    residual_u: np.ndarray
    residual_theta: np.ndarray
    slack_u: float
    slack_theta: float

    @property
    def max_u(self) -> float:
        return float(self.residual_u[1:].max()) if len(self.residual_u) > 1 else 0.0

    @property
    def max_theta(self) -> float:
        return float(self.residual_theta[1:].max()) if len(self.residual_theta) > 1 else 0.0

    @property
    def passed(self) -> bool:
        return self.max_u <= self.slack_u and self.max_theta <= self.slack_theta


def energy_monitor(traj: Trajectory, system: GalerkinSystem, bounds: EnergyBounds) -> EnergyReport:
    """Residuals ``lhs - rhs`` of the two fractional energy inequalities.

    velocity: ``D|u|^2 + nu' ||u||^2 <= (c'/nu) ||theta||^2 + (4/nu) ||f1||_*^2``
    temperature: ``D|theta|^2 + kappa' ||theta||^2 <= (2/kappa) ||f2||_*^2``
    """
    basis = system.basis
    p = system.params
    nrm = traj.norms(basis)
    m = traj.m
    d1 = dual_norms(traj.forcing[:, :m], basis.S)
    d2 = dual_norms(traj.forcing[:, m:], basis.St)

    Du = _caputo(traj, nrm["u_l2"] ** 2)
    Dt = _caputo(traj, nrm["theta_l2"] ** 2)
    lhs_u = Du + bounds.nu_prime * nrm["u_h1"] ** 2
    lhs_t = Dt + bounds.kappa_prime * nrm["theta_h1"] ** 2
    rhs_u = bounds.c_prime / p.nu * nrm["theta_h1"] ** 2 + 4.0 / p.nu * d1**2
    rhs_t = 2.0 / p.kappa * d2**2
    res_u = lhs_u - rhs_u
    res_t = lhs_t - rhs_t
    res_u[0] = res_t[0] = 0.0
    dt = traj.grid.dt
    scale_u = float(np.max(np.abs(Du[1:]) + bounds.nu_prime * nrm["u_h1"][1:] ** 2, initial=0.0))
    scale_t = float(np.max(np.abs(Dt[1:]) + bounds.kappa_prime * nrm["theta_h1"][1:] ** 2, initial=0.0))
    return EnergyReport(res_u, res_t, slack_tolerance(dt, p.alpha, scale_u), slack_tolerance(dt, p.alpha, scale_t))


def coercivity_check(traj: Trajectory) -> float:
    """Smallest ``(v, D v) - D|v|^2 / 2`` over steps, for both unknowns.

    Nonnegative for the uncorrected L1 scheme; returns the minimum over all
    steps and both blocks.
    """
    if traj.steps == 0:
        return 0.0
    worst = np.inf
    for v in (traj.f, traj.h):
        Dv = _caputo(traj, v)
        D2 = _caputo(traj, np.sum(v * v, axis=1))
        defect = np.sum(v * Dv, axis=1) - 0.5 * D2
        worst = min(worst, float(defect[1:].min()))
    return worst


@dataclass(frozen=True)
class AprioriReport:
    predicted: dict[str, float]
    measured: dict[str, float]

    @property
    def margins(self) -> dict[str, float]:
        return {k: self.predicted[k] - self.measured[k] for k in self.predicted}

    @property
    def passed(self) -> bool:
        return all(v >= 0.0 for v in self.margins.values())


def _trapezoid(values: np.ndarray, dt: float) -> float:
    return float(np.trapezoid(values, dx=dt)) if hasattr(np, "trapezoid") else float(np.trapz(values, dx=dt))


def apriori_bounds(traj: Trajectory, system: GalerkinSystem, bounds: EnergyBounds) -> AprioriReport:
    """Predicted sup and time-integrated bounds against the measured ones."""
    p = system.params
    fs = system.forcing
    basis = system.basis
    m = traj.m
    dt = traj.grid.dt
    T = dt * traj.steps
    alpha = p.alpha
    ga = gamma(alpha)
    nu, kap = p.nu, p.kappa
    nup, kapp, cp = bounds.nu_prime, bounds.kappa_prime, bounds.c_prime
    F1 = _trapezoid(dual_norms(traj.forcing[:, :m], basis.S) ** (2.0 / fs.alpha1), dt)
    F2 = _trapezoid(dual_norms(traj.forcing[:, m:], basis.St) ** (2.0 / fs.alpha2), dt)
    u0 = float(np.sum(traj.f[0] ** 2))
    t0 = float(np.sum(traj.h[0] ** 2))
    Ta = T ** (alpha - 1.0)

    sup_u = u0 + cp / (nu * kapp) * t0 + 2 * cp / (nu * kap * kapp * ga) * F2 + 4 / (nu * ga) * F1 + bounds.C1
    sup_t = t0 + 2 / (kap * ga) * F2 + bounds.C2
    int_u = ga / (nup * Ta) * sup_u
    int_t = ga / (kapp * Ta) * sup_t

    nrm = traj.norms(basis)
    measured = {
        "sup_u": float(np.max(nrm["u_l2"] ** 2)),
        "sup_theta": float(np.max(nrm["theta_l2"] ** 2)),
        "int_grad_u": _trapezoid(nrm["u_h1"] ** 2, dt),
        "int_grad_theta": _trapezoid(nrm["theta_h1"] ** 2, dt),
    }
    predicted = {"sup_u": sup_u, "sup_theta": sup_t, "int_grad_u": int_u, "int_grad_theta": int_t}
    return AprioriReport(predicted, measured)


@dataclass(frozen=True)
class UniquenessReport:
    divergence: np.ndarray
    envelope: np.ndarray
    identical: bool

    @property
    def passed(self) -> bool:
        # an infinite envelope bounds nothing
        if not np.all(np.isfinite(self.envelope)):
            return False
        return bool(np.all(self.divergence <= self.envelope * (1.0 + 1e-9) + 1e-300))


def gronwall_envelope(v0: float, K: np.ndarray, alpha: float, grid: TimeGrid, *, max_iters: int = 500) -> np.ndarray:
    """Solution of ``V = v0 + I^alpha(K V)`` by fixed-point iteration."""
    V = np.full(grid.n_steps + 1, v0)
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(max_iters):
            V_new = frac_gronwall_bound(v0, alpha, SampledSignal(grid, K * V)).values
            if not np.all(np.isfinite(V_new)):
                return np.where(np.isfinite(V_new), V_new, np.inf)
            if np.all(np.abs(V_new - V) <= 1e-13 * np.abs(V_new)):
                return V_new
            V = V_new
    return V


def uniqueness_probe(
    system: GalerkinSystem, y0: np.ndarray, grid: TimeGrid, eps: float, *, seed: int = 0, **solve_kw
) -> UniquenessReport:
    """Solve from ``y0`` and a perturbed copy and compare with the Gronwall envelope.

    With ``e = y1 - y2`` and ``N`` quadratic, ``N(y1) - N(y2) = J(ybar) e`` exactly,
    so ``D|e|^2 <= K |e|^2`` with
    ``K(t) = 2 max(0, -lambda_min(sym(L + J(ybar(t)))))``.
    """
    rng = np.random.default_rng(seed)
    d = rng.standard_normal(len(y0))
    y0b = y0 + eps * d / np.linalg.norm(d)
    a = solve(system, y0, grid, **solve_kw)
    b = solve(system, y0b, grid, **solve_kw)
    n = min(a.steps, b.steps)
    ya, yb = a.y[: n + 1], b.y[: n + 1]
    V = np.sum((ya - yb) ** 2, axis=1)
    K = np.empty(n + 1)
    for k in range(n + 1):
        M = system.L + system.jacobian(0.5 * (ya[k] + yb[k]))
        K[k] = 2.0 * max(0.0, -float(np.linalg.eigvalsh(0.5 * (M + M.T))[0]))
    sub = TimeGrid(grid.dt * max(n, 1), max(n, 1))
    env = gronwall_envelope(float(V[0]), K, system.params.alpha, sub) if n else V.copy()
    identical = a.y.shape == b.y.shape and bool(np.array_equal(a.y, b.y))
    return UniquenessReport(V, env, identical)
