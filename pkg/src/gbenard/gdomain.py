"""Periodic grid, the thickness weight g, weighted inner products and field IO.

Fields are plain arrays on an ``n x n`` collocation grid of the unit torus
with ``indexing='ij'`` (axis -2 is x, axis -1 is y). A scalar field has
shape ``(n, n)``, a vector field ``(2, n, n)``; leading batch axes are
allowed by the spectral helpers.
"""

from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.fft as sfft

TWO_PI = 2.0 * np.pi


class GWeightError(ValueError):
    """Raised when a weight violates positivity or the smallness condition."""


class FieldShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Grid2:
    n: int

    def __post_init__(self) -> None:
        n = self.n
        if not isinstance(n, (int, np.integer)) or n < 8 or n & (n - 1):
            raise ValueError(f"grid size must be a power of two >= 8, got {n!r}")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @cached_property
    def nodes(self) -> np.ndarray:
        return np.arange(self.n) / self.n

    @cached_property
    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return tuple(np.meshgrid(self.nodes, self.nodes, indexing="ij"))

    @cached_property
    def wavenumbers(self) -> tuple[np.ndarray, np.ndarray]:
        """Integer wavenumbers matching the ``rfft2`` layout."""
        n = self.n
        kx = np.fft.fftfreq(n, 1.0 / n)[:, None]
        ky = np.arange(n // 2 + 1, dtype=float)[None, :]
        return np.broadcast_to(kx, (n, n // 2 + 1)), np.broadcast_to(ky, (n, n // 2 + 1))

    @cached_property
    def deriv_symbols(self) -> np.ndarray:
        """Multipliers ``2*pi*i*k`` with the Nyquist derivative removed."""
        kx, ky = self.wavenumbers
        half = self.n // 2
        sx = np.where(np.abs(kx) == half, 0.0, 1j * TWO_PI * kx)
        sy = np.where(ky == half, 0.0, 1j * TWO_PI * ky)
        return np.stack([sx, sy])

    @cached_property
    def k2(self) -> np.ndarray:
        """``|2 pi k|^2`` consistent with two applications of the derivative."""
        s = self.deriv_symbols
        return -(s[0] ** 2 + s[1] ** 2).real

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        kx, ky = self.wavenumbers
        cut = self.n // 3
        return (np.abs(kx) <= cut) & (ky <= cut)

    def check(self, a: np.ndarray) -> None:
        if a.ndim < 2 or a.shape[-2:] != (self.n, self.n):
            raise FieldShapeError(f"field of shape {a.shape} does not live on a {self.n}x{self.n} grid")
        if not np.all(np.isfinite(a)):
            raise FieldShapeError("field contains non-finite values")


def _n_of(a: np.ndarray) -> int:
    return a.shape[-1]


def fft2(a: np.ndarray) -> np.ndarray:
    return sfft.rfft2(a, axes=(-2, -1))


def ifft2(ah: np.ndarray, n: int) -> np.ndarray:
    return sfft.irfft2(ah, s=(n, n), axes=(-2, -1))


def grad(a: np.ndarray, grid: Grid2) -> np.ndarray:
    """Spectral gradient; a new axis of length 2 is inserted before the grid axes."""
    ah = fft2(a)
    return ifft2(grid.deriv_symbols * ah[..., None, :, :], grid.n)


def div(v: np.ndarray, grid: Grid2) -> np.ndarray:
    """Spectral divergence over the axis just before the grid axes."""
    vh = fft2(v)
    return ifft2(np.sum(grid.deriv_symbols * vh, axis=-3), grid.n)


def laplacian(a: np.ndarray, grid: Grid2) -> np.ndarray:
    return ifft2(-grid.k2 * fft2(a), grid.n)


def inverse_laplacian(a: np.ndarray, grid: Grid2) -> np.ndarray:
    """Solve ``-Delta x = a`` on mean-zero modes (the mean of ``a`` is ignored)."""
    k2 = grid.k2
    inv = np.divide(1.0, k2, out=np.zeros_like(k2), where=k2 > 0)
    return ifft2(inv * fft2(a), grid.n)


def dealias(a: np.ndarray, grid: Grid2) -> np.ndarray:
    """Keep only modes with ``|kx|, |ky| <= n // 3``."""
    return ifft2(np.where(grid.dealias_mask, fft2(a), 0.0), grid.n)


def strip_nyquist(a: np.ndarray) -> np.ndarray:
    """Remove the Nyquist row and column, which the spectral derivative cannot see."""
    n = _n_of(a)
    ah = fft2(a)
    ah[..., n // 2, :] = 0.0
    ah[..., :, n // 2] = 0.0
    return ifft2(ah, n)


def _band_rows(n: int) -> np.ndarray:
    half = n // 2
    return np.r_[0:half, n - half + 1 : n]


def pad(a: np.ndarray, big: int) -> np.ndarray:
    """Spectral interpolation onto a ``big x big`` grid, dropping Nyquist content."""
    n = _n_of(a)
    half = n // 2
    ah = fft2(a)
    out = np.zeros(a.shape[:-2] + (big, big // 2 + 1), dtype=complex)
    rows = _band_rows(n)
    big_rows = np.r_[0:half, big - half + 1 : big]
    out[..., big_rows, :half] = ah[..., rows, :half]
    return ifft2(out * (big / n) ** 2, big)


def unpad(a: np.ndarray, n: int) -> np.ndarray:
    """Restrict a fine-grid field to the non-Nyquist band of an ``n`` grid."""
    big = _n_of(a)
    half = n // 2
    ah = fft2(a)
    out = np.zeros(a.shape[:-2] + (n, n // 2 + 1), dtype=complex)
    rows = _band_rows(n)
    big_rows = np.r_[0:half, big - half + 1 : big]
    out[..., rows, :half] = ah[..., big_rows, :half]
    return ifft2(out * (n / big) ** 2, n)


def padded_size(n: int) -> int:
    """Grid size on which products of three band-limited factors are alias-free."""
    return 3 * n // 2


def grid_mean(a: np.ndarray) -> np.ndarray:
    return a.mean(axis=(-2, -1))


# weight families: name -> builder(params) returning f(x, y)
WeightBuilder = Callable[..., Callable[[np.ndarray, np.ndarray], np.ndarray]]


def _constant(value: float = 1.0):
    return lambda x, y: np.full(np.broadcast(x, y).shape, float(value))


def _sinusoidal(amplitude: float = 0.2, mean: float = 1.0, kx: int = 1, ky: int = 0, phase: float = 0.0):
    return lambda x, y: mean + amplitude * np.sin(TWO_PI * (kx * x + ky * y) + phase)


def _cosine_product(amplitude: float = 0.1, mean: float = 1.0, p: int = 1, q: int = 1):
    return lambda x, y: mean + amplitude * np.cos(TWO_PI * p * x) * np.cos(TWO_PI * q * y)


WEIGHT_FAMILIES: dict[str, WeightBuilder] = {
    "constant": _constant,
    "sinusoidal": _sinusoidal,
    "cosine_product": _cosine_product,
}


@dataclass(frozen=True, eq=False)
class GWeight:
    name: str
    params: tuple[tuple[str, float], ...]
    grid: Grid2
    samples: np.ndarray = field(repr=False)
    gradient: np.ndarray = field(repr=False)
    m0: float
    M0: float
    grad_sup: float

    @property
    def inverse(self) -> np.ndarray:
        return 1.0 / self.samples

    @property
    def log_gradient(self) -> np.ndarray:
        """``grad g / g`` on the grid."""
        return self.gradient / self.samples

    @property
    def mean(self) -> float:
        return float(self.samples.mean())

    @property
    def is_constant(self) -> bool:
        return self.grad_sup == 0.0 or self.M0 - self.m0 <= 1e-14 * self.M0

    def key(self) -> str:
        """Stable hash of the weight expression (independent of the grid)."""
        text = self.name + ";" + ";".join(f"{k}={float(v)!r}" for k, v in self.params)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def on(self, grid: Grid2) -> GWeight:
        return make_gweight(self.name, grid, check_smallness=False, **dict(self.params))


def make_gweight(name: str, grid: Grid2, *, check_smallness: bool = True, **params: float) -> GWeight:
    """Sample a registered weight family and certify its bounds.

    ``m0``, ``M0`` and ``sup |grad g|`` are taken on a 4x refined grid.
    With ``check_smallness`` the condition ``|grad g|^2 < pi^2 m0^3 / M0`` is
    enforced; it keeps the reduced viscosity and diffusivity of the energy
    estimates above half their nominal values.
    """
    try:
        builder = WEIGHT_FAMILIES[name]
    except KeyError:
        raise GWeightError(f"unknown weight family {name!r}; known: {sorted(WEIGHT_FAMILIES)}") from None
    f = builder(**params)
    x, y = grid.mesh
    samples = np.asarray(f(x, y), dtype=float)

    fine = Grid2(4 * grid.n)
    xf, yf = fine.mesh
    fine_samples = np.asarray(f(xf, yf), dtype=float)
    m0 = float(fine_samples.min())
    M0 = float(fine_samples.max())
    if not np.all(np.isfinite(fine_samples)) or m0 <= 0.0:
        raise GWeightError(f"m0 violation: weight {name} has minimum {m0:.6g} <= 0")
    grad_fine = grad(fine_samples, fine)
    grad_sup = float(np.sqrt((grad_fine**2).sum(axis=0)).max())
    if grad_sup < 1e-12 * M0:
        grad_sup = 0.0
    if check_smallness and grad_sup**2 >= np.pi**2 * m0**3 / M0:
        raise GWeightError(
            f"smallness violation: |grad g|^2 = {grad_sup**2:.6g} >= pi^2 m0^3 / M0 = {np.pi**2 * m0**3 / M0:.6g}"
        )
    return GWeight(
        name=name,
        params=tuple(sorted((k, float(v)) for k, v in params.items())),
        grid=grid,
        samples=samples,
        gradient=grad(samples, grid),
        m0=m0,
        M0=M0,
        grad_sup=grad_sup,
    )


def _check_pair(a: np.ndarray, b: np.ndarray, g: GWeight) -> None:
    if a.shape != b.shape:
        raise FieldShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    g.grid.check(a)
    g.grid.check(b)


def inner_g(a: np.ndarray, b: np.ndarray, g: GWeight) -> float:
    """Weighted L2 inner product of two scalar or two vector fields."""
    _check_pair(a, b, g)
    return float(np.sum(a * b * g.samples) / g.grid.n**2)


def norm_g(a: np.ndarray, g: GWeight) -> float:
    return float(np.sqrt(max(inner_g(a, a, g), 0.0)))


def gram_g(A: np.ndarray, B: np.ndarray, g: GWeight, ncomp: int) -> np.ndarray:
    """Matrix of weighted inner products between two stacks of fields.

    ``ncomp`` is the number of trailing component axes (0 for scalars,
    1 for vector fields).
    """
    n = g.grid.n
    a = A.reshape(A.shape[0], -1)
    b = (B * g.samples).reshape(B.shape[0], -1)
    return a @ b.T / n**2


def h1_seminorm_g(a: np.ndarray, g: GWeight) -> float:
    """``sqrt(sum_i (d_i a, d_i a)_g)``."""
    g.grid.check(a)
    d = grad(a, g.grid)
    return float(np.sqrt(np.sum(d * d * g.samples) / g.grid.n**2))


def g_flux(u: np.ndarray, g: GWeight) -> np.ndarray:
    """Dealiased mass flux ``g u``."""
    return dealias(g.samples * u, g.grid)


def g_divergence(u: np.ndarray, g: GWeight) -> np.ndarray:
    """Spectral ``div(g u)`` with the product dealiased."""
    if u.shape[-3] != 2:
        raise FieldShapeError("g_divergence expects a vector field")
    g.grid.check(u)
    return div(g_flux(u, g), g.grid)


# snapshot files: int32 n, int32 ncomp, float64 time, float64 alpha, then
# float64 values in C order (ncomp, n, n), all little-endian
_HEADER = struct.Struct("<iidd")


@dataclass(frozen=True)
class Snapshot:
    values: np.ndarray
    time: float
    alpha: float


def write_snapshot(path: str | Path, values: np.ndarray, time: float, alpha: float) -> None:
    values = np.asarray(values, dtype="<f8")
    arr = values.reshape((1,) + values.shape) if values.ndim == 2 else values
    if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
        raise FieldShapeError(f"cannot write field of shape {values.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(arr.shape[1], arr.shape[0], float(time), float(alpha)))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_snapshot(path: str | Path) -> Snapshot:
    data = Path(path).read_bytes()
    n, ncomp, time, alpha = _HEADER.unpack_from(data)
    body = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    if body.size != ncomp * n * n:
        raise ValueError(f"{path}: expected {ncomp * n * n} values, found {body.size}")
    values = body.reshape(ncomp, n, n).copy()
    return Snapshot(values[0] if ncomp == 1 else values, time, alpha)


def write_snapshot_csv(path: str | Path, values: np.ndarray, grid: Grid2) -> None:
    """One row per node: x, y and the field components."""
    arr = values[None] if values.ndim == 2 else values
    x, y = grid.mesh
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y"] + [f"c{i}" for i in range(arr.shape[0])])
        for i in range(grid.n):
            for j in range(grid.n):
                w.writerow([repr(float(x[i, j])), repr(float(y[i, j]))] + [repr(float(c[i, j])) for c in arr])
