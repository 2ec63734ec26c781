"""Weighted Stokes/heat operators, trilinear forms and the Galerkin basis.

Conventions: ``P_g`` is the g-orthogonal projection onto mean-zero fields
with ``div(g u) = 0`` (the divergence taken with the dealiased flux), and
``Pt_g`` the g-orthogonal projection onto scalars with ``(theta, 1)_g = 0``.

Trilinear forms are evaluated on a 3/2-padded grid so the integrals are exact
for the band-limited interpolants; this makes ``b(u, v, w) = -b(u, w, v)``
hold to solver tolerance whenever ``u`` is g-solenoidal.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gdomain import (
    TWO_PI,
    GWeight,
    Grid2,
    dealias,
    div,
    fft2,
    g_flux,
    gram_g,
    grad,
    grid_mean,
    ifft2,
    inverse_laplacian,
    laplacian,
    pad,
    padded_size,
    strip_nyquist,
    unpad,
)

log = logging.getLogger(__name__)


class ProjectionError(ArithmeticError):
    pass


class EigenSolverError(ArithmeticError):
    pass


class BasisError(ArithmeticError):
    pass


# projections


def _sum2(a: np.ndarray) -> np.ndarray:
    return a.sum(axis=(-2, -1))


def _solve_potential(rhs: np.ndarray, g: GWeight, scale: np.ndarray, tol: float, max_iters: int) -> np.ndarray:
    """Batched PCG for ``-div(Pi(g grad phi)) = rhs`` on dealiased modes."""
    grid = g.grid
    mask = grid.dealias_mask
    k2 = grid.k2
    prec = np.divide(1.0, g.mean * k2, out=np.zeros_like(k2), where=(k2 > 0) & mask)

    def apply(phi):
        return -div(g_flux(grad(phi, grid), g), grid)

    def precond(r):
        return ifft2(prec * fft2(r), grid.n)

    phi = np.zeros_like(rhs)
    r = rhs.copy()
    target = tol * np.maximum(np.sqrt(_sum2(rhs * rhs)), scale)
    rnorm = np.sqrt(_sum2(r * r))
    active = rnorm > target
    if not np.any(active):
        return phi
    z = precond(r)
    p = z.copy()
    rz = _sum2(r * z)
    for _ in range(max_iters):
        q = apply(p)
        pq = _sum2(p * q)
        ok = active & (pq > 0)
        a = np.divide(rz, pq, out=np.zeros_like(rz), where=ok)
        phi += a[..., None, None] * p
        r -= a[..., None, None] * q
        rnorm = np.sqrt(_sum2(r * r))
        active = active & (rnorm > target)
        if not np.any(active):
            return phi
        z = precond(r)
        rz_new = _sum2(r * z)
        beta = np.divide(rz_new, rz, out=np.zeros_like(rz), where=active & (rz > 0))
        p = z + beta[..., None, None] * p
        rz = rz_new
    worst = float(np.max(rnorm / np.maximum(target / tol, 1e-300)))
    raise ProjectionError(f"projection solve did not converge in {max_iters} iterations (relative residual {worst:.3g})")


def leray_project_g(v: np.ndarray, g: GWeight, *, tol: float = 1e-11, max_iters: int = 500) -> np.ndarray:
    """g-orthogonal projection onto mean-zero g-solenoidal fields.

    Accepts a vector field ``(2, n, n)`` or a stack ``(k, 2, n, n)``.
    """
    g.grid.check(v)
    grid = g.grid
    flux = g_flux(v, g)
    # the flux gradient norm sets the level below which the divergence is round-off
    d = grad(flux, grid)
    scale = np.sqrt(_sum2(np.sum(d * d, axis=(-4, -3))))
    rhs = -div(flux, grid)
    phi = _solve_potential(rhs, g, scale, tol, max_iters)
    u = v - grad(phi, grid)
    c = grid_mean(u) / grid_mean(g.inverse)
    return u - c[..., None, None] * g.inverse


def mean_project_g(theta: np.ndarray, g: GWeight) -> np.ndarray:
    """g-orthogonal projection onto scalars with zero plain mean."""
    c = grid_mean(theta) / grid_mean(g.inverse)
    return theta - np.asarray(c)[..., None, None] * g.inverse


# second-order operators


def g_laplacian(a: np.ndarray, g: GWeight, *, form: str = "divergence") -> np.ndarray:
    """``Delta a + (1/g) grad g . grad a`` applied componentwise.

    ``form='divergence'`` evaluates ``(1/g) div(g grad a)`` and is exactly
    symmetric in the discrete g-inner product; ``form='expanded'`` evaluates
    the sum of the two terms. Products are formed on the grid, which is
    alias-free for fields in the dealiased band and band-limited weights.
    """
    grid = g.grid
    grid.check(a)
    if form == "divergence":
        return div(g.samples * grad(a, grid), grid) / g.samples
    if form == "expanded":
        da = grad(a, grid)
        return laplacian(a, grid) + np.sum(g.log_gradient * da, axis=-3)
    raise ValueError(f"unknown form {form!r}")


def g_stokes_apply(u: np.ndarray, g: GWeight) -> np.ndarray:
    """``A_g u = P_g(-Delta_g u)``."""
    return leray_project_g(-g_laplacian(u, g), g)


def g_heat_apply(theta: np.ndarray, g: GWeight) -> np.ndarray:
    return mean_project_g(-g_laplacian(theta, g), g)


# trilinear forms


def _advect(flux: np.ndarray, v: np.ndarray, grid: Grid2) -> np.ndarray:
    """``sum_i flux_i d_i v`` on the grid band, exact for band-limited factors.

    ``flux`` has shape ``(..., 2, n, n)`` and ``v`` is scalar ``(..., n, n)`` or
    vector ``(..., 2, n, n)`` with matching batch axes.
    """
    big = padded_size(grid.n)
    fp = pad(flux, big)
    dv = pad(grad(v, grid), big)
    if dv.ndim == fp.ndim:  # scalar v: grad has the direction axis at -3
        prod = np.sum(fp * dv, axis=-3)
    else:  # vector v: (..., comp, dir, N, N)
        prod = np.sum(fp[..., None, :, :, :] * dv, axis=-3)
    return unpad(prod, grid.n)


def trilinear_bg(u: np.ndarray, v: np.ndarray, w: np.ndarray, g: GWeight) -> float:
    """``b_g(u, v, w) = int (g u . grad) v . w``."""
    R = _advect(g_flux(u, g), v, g.grid)
    return float(np.sum(R * w) / g.grid.n**2)


def trilinear_bg_scalar(u: np.ndarray, theta: np.ndarray, tau: np.ndarray, g: GWeight) -> float:
    """``int (g u . grad theta) tau`` for scalar ``theta``, ``tau``."""
    R = _advect(g_flux(u, g), theta, g.grid)
    return float(np.sum(R * tau) / g.grid.n**2)


def _log_flux(g: GWeight) -> np.ndarray:
    """Dealiased ``g * (grad g / g) = grad g``."""
    return dealias(g.gradient, g.grid)


def convective_Bg(u: np.ndarray, v: np.ndarray, g: GWeight) -> np.ndarray:
    """``B_g(u, v)`` with ``(B_g(u, v), w)_g = b_g(u, v, w)`` on the solenoidal space."""
    return leray_project_g(_advect(g_flux(u, g), v, g.grid) / g.samples, g)


def heat_advection(u: np.ndarray, theta: np.ndarray, g: GWeight) -> np.ndarray:
    return mean_project_g(_advect(g_flux(u, g), theta, g.grid) / g.samples, g)


def correction_Cg(u: np.ndarray, g: GWeight) -> np.ndarray:
    """``C_g u = P_g((grad g / g . grad) u)``."""
    return leray_project_g(_advect(_log_flux(g), u, g.grid) / g.samples, g)


def correction_Ctilde(theta: np.ndarray, g: GWeight) -> np.ndarray:
    return mean_project_g(_advect(_log_flux(g), theta, g.grid) / g.samples, g)


def correction_Ctilde_adjoint(theta: np.ndarray, g: GWeight) -> np.ndarray:
    """g-adjoint of :func:`correction_Ctilde` on mean-zero scalars."""
    grid = g.grid
    big = padded_size(grid.n)
    prod = unpad(pad(_log_flux(g), big) * pad(theta, big)[..., None, :, :], grid.n)
    return mean_project_g(-div(prod, grid) / g.samples, g)


def correction_Dtilde(theta: np.ndarray, g: GWeight) -> np.ndarray:
    """Remainder ``-(Ct + Ct*) theta`` that turns the heat weak form into ``Ct*``."""
    return -(correction_Ctilde(theta, g) + correction_Ctilde_adjoint(theta, g))


def ladyzhenskaya_ratio(u: np.ndarray, g: GWeight) -> float:
    """``|u|_{L4,g}^2 / (|u|_g |grad u|_g)``."""
    grid = g.grid
    grid.check(u)
    sq = np.sum(u * u, axis=0) if u.ndim == 3 else u * u
    l4 = np.sqrt(np.mean(g.samples * sq * sq))
    l2 = np.sqrt(np.mean(g.samples * sq))
    d = grad(u, grid)
    h1 = np.sqrt(np.sum(d * d * g.samples) / grid.n**2)
    if l2 * h1 == 0.0:
        raise ZeroDivisionError("ratio undefined for a field with zero norm or gradient")
    return float(l4 / (l2 * h1))


# eigen solver


def _low_modes(grid: Grid2, count: int, vector: bool) -> np.ndarray:
    x, y = grid.mesh
    ks = []
    r = 1
    while len(ks) * (4 if vector else 2) < count:
        ks = [
            (a, b)
            for a in range(-r, r + 1)
            for b in range(0, r + 1)
            if (b > 0 or a > 0)
        ]
        ks.sort(key=lambda k: (k[0] ** 2 + k[1] ** 2, k))
        r += 1
    out = []
    for a, b in ks:
        ph = TWO_PI * (a * x + b * y)
        for f in (np.cos(ph), np.sin(ph)):
            if vector:
                out.append(np.stack([f, np.zeros_like(f)]))
                out.append(np.stack([np.zeros_like(f), f]))
            else:
                out.append(f)
    return np.array(out[:count])


def _orthonormalize(S: np.ndarray, gram, drop: float = 1e-12) -> np.ndarray:
    G = gram(S, S)
    G = 0.5 * (G + G.T)
    e, V = np.linalg.eigh(G)
    keep = e > drop * e.max()
    T = V[:, keep] / np.sqrt(e[keep])
    return np.tensordot(T.T, S, axes=1)


def _clean_block(S: np.ndarray, project, gram) -> np.ndarray:
    """Project and g-orthonormalize twice.

    One pass can amplify the projection's round-off in directions that were
    nearly cancelled; the second pass removes it again.
    """
    nrm = np.sqrt(np.maximum(np.diag(gram(S, S)), 0.0))
    S = S[nrm > 0] / nrm[nrm > 0].reshape((-1,) + (1,) * (S.ndim - 1))
    for _ in range(2):
        S = _orthonormalize(project(S), gram, drop=1e-10)
    return S


def eig_lowest(apply_op, project, precond, gram, X0: np.ndarray, m: int, *, tol: float = 1e-9, max_iters: int = 300):
    """Block preconditioned eigen iteration for the ``m`` smallest eigenpairs.

    Every search space is projected and g-orthonormalized twice so that
    round-off in the projection cannot pull null directions into the basis.
    Returns ``(eigenvalues, modes, iterations)`` with g-orthonormal modes.
    """
    X = _clean_block(X0, project, gram)
    k = X.shape[0]
    if k < m:
        raise EigenSolverError(f"initial block spans only {k} < {m} directions")
    expand = (-1,) + (1,) * (X.ndim - 1)
    Pd = None
    AX = apply_op(X)
    res = np.inf
    for it in range(1, max_iters + 1):
        H = gram(X, AX)
        lam, C = np.linalg.eigh(0.5 * (H + H.T))
        X = np.tensordot(C.T, X, axes=1)
        AX = np.tensordot(C.T, AX, axes=1)
        R = AX - lam.reshape(expand) * X
        rn = np.sqrt(np.maximum(np.diag(gram(R, R)), 0.0)) / np.maximum(np.abs(lam), np.abs(lam).max() * 1e-3)
        res = float(rn[:m].max())
        if res <= tol:
            return lam[:m], X[:m], it
        W = precond(R)
        S = np.concatenate([X, W] if Pd is None else [X, W, Pd])
        S = _clean_block(S, project, gram)
        AS = apply_op(S)
        H = gram(S, AS)
        mu, Q = np.linalg.eigh(0.5 * (H + H.T))
        Q = Q[:, :k]
        Xn = np.tensordot(Q.T, S, axes=1)
        AX = np.tensordot(Q.T, AS, axes=1)
        # next conjugate direction: the part of the update outside the old block
        Pd = Xn - np.tensordot(gram(Xn, X), X, axes=1)
        X = Xn
    raise EigenSolverError(f"eigen iteration stalled after {max_iters} iterations (residual {res:.3g})")


def _fix_signs(X: np.ndarray) -> np.ndarray:
    flat = X.reshape(X.shape[0], -1)
    idx = np.argmax(np.abs(flat) > 1e-6 * np.abs(flat).max(axis=1, keepdims=True), axis=1)
    s = np.sign(flat[np.arange(len(idx)), idx])
    s[s == 0] = 1.0
    return X * s.reshape((-1,) + (1,) * (X.ndim - 1))


def g_stokes_eigs(g: GWeight, m: int, *, extra: int = 8, tol: float = 1e-9):
    """Lowest ``m`` eigenpairs of ``A_g``; modes are g-orthonormal."""
    grid = g.grid

    def gram(A, B):
        return gram_g(A, B, g, 1)

    def precond(R):
        return inverse_laplacian(R, grid)

    def project(V):
        return leray_project_g(strip_nyquist(V), g)

    X0 = _clean_block(_low_modes(grid, 2 * (m + extra), vector=True), project, gram)[: m + extra]
    lam, X, it = eig_lowest(lambda V: g_stokes_apply(V, g), project, precond, gram, X0, m, tol=tol)
    log.debug("stokes eigen solve converged in %d iterations", it)
    return lam, _fix_signs(X)


def g_heat_eigs(g: GWeight, m: int, *, extra: int = 8, tol: float = 1e-9):
    """Lowest ``m`` eigenpairs of ``Pt_g(-Delta_g)`` on mean-zero scalars."""
    grid = g.grid

    def gram(A, B):
        return gram_g(A, B, g, 0)

    def project(V):
        return mean_project_g(strip_nyquist(V), g)

    X0 = _clean_block(_low_modes(grid, 2 * (m + extra), vector=False), project, gram)[: m + extra]
    lam, X, it = eig_lowest(
        lambda V: g_heat_apply(V, g),
        project,
        lambda R: inverse_laplacian(R, grid),
        gram,
        X0,
        m,
        tol=tol,
    )
    log.debug("heat eigen solve converged in %d iterations", it)
    return lam, _fix_signs(X)


# Galerkin basis


@dataclass(frozen=True, eq=False)
class GalerkinBasis:
    """Modes and projected tensors of the truncated system.

    ``B[i, j, k] = b_g(w_i, w_j, w_k)``, ``C[i, j] = b_g(grad g / g, w_i, w_j)``,
    ``S`` the g-stiffness of the velocity modes, ``Bt[i, j, k] = bt(w_i, t_j, t_k)``,
    ``Ct[i, j] = bt(grad g / g, t_i, t_j)``, ``St`` the temperature stiffness and
    ``buoyancy[c, i, j] = (e_c t_j, w_i)_g``.
    """

    g: GWeight
    vel_eigs: np.ndarray
    vel_modes: np.ndarray = field(repr=False)
    temp_eigs: np.ndarray
    temp_modes: np.ndarray = field(repr=False)
    B: np.ndarray = field(repr=False)
    C: np.ndarray = field(repr=False)
    S: np.ndarray = field(repr=False)
    Bt: np.ndarray = field(repr=False)
    Ct: np.ndarray = field(repr=False)
    St: np.ndarray = field(repr=False)
    buoyancy: np.ndarray = field(repr=False)

    @property
    def m(self) -> int:
        return len(self.vel_eigs)

    @property
    def grid(self) -> Grid2:
        return self.g.grid

    def coupling(self, xi) -> np.ndarray:
        """``R[i, j] = (xi t_j, w_i)_g``."""
        return xi[0] * self.buoyancy[0] + xi[1] * self.buoyancy[1]

    def truncate(self, m: int) -> GalerkinBasis:
        if not 1 <= m <= self.m:
            raise ValueError(f"cannot truncate a basis of size {self.m} to {m}")
        s = slice(0, m)
        return GalerkinBasis(
            self.g,
            self.vel_eigs[s],
            self.vel_modes[s],
            self.temp_eigs[s],
            self.temp_modes[s],
            self.B[s, s, s],
            self.C[s, s],
            self.S[s, s],
            self.Bt[s, s, s],
            self.Ct[s, s],
            self.St[s, s],
            self.buoyancy[:, s, s],
        )

    def velocity(self, coeffs: np.ndarray) -> np.ndarray:
        return np.tensordot(coeffs, self.vel_modes, axes=1)

    def temperature(self, coeffs: np.ndarray) -> np.ndarray:
        return np.tensordot(coeffs, self.temp_modes, axes=1)

    def project_velocity(self, u: np.ndarray) -> tuple[np.ndarray, float]:
        """Coefficients ``(u, w_j)_g`` and the g-norm of what is left over."""
        c = gram_g(self.vel_modes, u[None], self.g, 1)[:, 0]
        rest = u - self.velocity(c)
        return c, float(np.sqrt(gram_g(rest[None], rest[None], self.g, 1)[0, 0]))

    def project_temperature(self, theta: np.ndarray) -> tuple[np.ndarray, float]:
        c = gram_g(self.temp_modes, theta[None], self.g, 0)[:, 0]
        rest = theta - self.temperature(c)
        return c, float(np.sqrt(gram_g(rest[None], rest[None], self.g, 0)[0, 0]))

    def skew_defect(self) -> float:
        """Largest violation of skew-symmetry in the last two tensor slots.

        Measured against ``sqrt(lambda_max)``, the size of ``b_g`` on unit
        modes, since the tensors themselves can vanish by symmetry.
        """
        scale = max(np.abs(self.B).max(), np.abs(self.Bt).max(), np.sqrt(self.vel_eigs.max()), np.sqrt(self.temp_eigs.max()))
        d = max(
            np.abs(self.B + self.B.transpose(0, 2, 1)).max(),
            np.abs(self.Bt + self.Bt.transpose(0, 2, 1)).max(),
        )
        return float(d / scale)


def _advection_tensor(W: np.ndarray, V: np.ndarray, flux: np.ndarray, g: GWeight) -> np.ndarray:
    grid = g.grid
    big = padded_size(grid.n)
    dV = pad(grad(V, grid), big)
    n2 = grid.n**2
    m = len(flux)
    out = np.empty((m, len(V), len(W)))
    Wf = W.reshape(len(W), -1)
    for i in range(m):
        fp = pad(flux[i], big)
        if V.ndim == 3:
            prod = np.sum(fp * dV, axis=-3)
        else:
            prod = np.sum(fp[None, None] * dV, axis=-3)
        R = unpad(prod, grid.n).reshape(len(V), -1)
        out[i] = R @ Wf.T / n2
    return out


def build_basis(g: GWeight, m: int, *, tol: float = 1e-9, skew_tol: float = 1e-8) -> GalerkinBasis:
    lam, W = g_stokes_eigs(g, m, tol=tol)
    mu, T = g_heat_eigs(g, m, tol=tol)
    grid = g.grid
    n2 = grid.n**2

    flux_w = g_flux(W, g)
    B = _advection_tensor(W, W, flux_w, g)
    Bt = _advection_tensor(T, T, flux_w, g)
    lf = _log_flux(g)
    C = _advection_tensor(W, W, lf[None], g)[0]
    Ct = _advection_tensor(T, T, lf[None], g)[0]

    dW = grad(W, grid).reshape(m, -1, n2)
    gs = g.samples.reshape(-1)
    S = np.einsum("iap,jap,p->ij", dW, dW, gs) / n2
    dT = grad(T, grid).reshape(m, 2, n2)
    St = np.einsum("iap,jap,p->ij", dT, dT, gs) / n2
    buoy = np.stack([gram_g(W[:, c], T, g, 0) for c in range(2)])

    basis = GalerkinBasis(g, lam, W, mu, T, B, C, 0.5 * (S + S.T), Bt, Ct, 0.5 * (St + St.T), buoy)
    defect = basis.skew_defect()
    if defect > skew_tol:
        raise BasisError(f"trilinear tensors fail skew-symmetry: relative defect {defect:.3g}")
    return basis


# on-disk cache


def cache_key(g: GWeight, m: int) -> str:
    text = f"{g.key()}|n={g.grid.n}|m={m}"
    return hashlib.sha256(text.encode()).hexdigest()[:20]


_ARRAYS = ("vel_eigs", "vel_modes", "temp_eigs", "temp_modes", "B", "C", "S", "Bt", "Ct", "St", "buoyancy")


def save_basis(basis: GalerkinBasis, path: str | Path) -> None:
    np.savez(
        path,
        key=np.array(cache_key(basis.g, basis.m)),
        g_name=np.array(basis.g.name),
        g_params=np.array(repr(basis.g.params)),
        **{k: getattr(basis, k) for k in _ARRAYS},
    )


def load_basis(path: str | Path, g: GWeight) -> GalerkinBasis:
    with np.load(path) as data:
        arrays = {k: data[k] for k in _ARRAYS}
        key = str(data["key"])
    m = len(arrays["vel_eigs"])
    if key != cache_key(g, m):
        raise BasisError(f"{path}: cache key {key} does not match the requested weight/grid")
    return GalerkinBasis(g, **arrays)


def cached_basis(g: GWeight, m: int, cache_dir: str | Path | None) -> GalerkinBasis:
    """Build the basis or load it from ``cache_dir/basis-<key>.npz``."""
    if cache_dir is None:
        return build_basis(g, m)
    path = Path(cache_dir) / f"basis-{cache_key(g, m)}.npz"
    if path.exists():
        return load_basis(path, g)
    basis = build_basis(g, m)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_basis(basis, path)
    return basis
