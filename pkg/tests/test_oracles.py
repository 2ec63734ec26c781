import numpy as np
import pytest
from scipy.linalg import expm

from gbenard.oracles import (
    ManufacturedCase,
    caputo_power,
    classical_boussinesq_step,
    classical_trajectory,
    definition_quadrature,
    manufactured_fields,
    manufactured_forcing,
    richardson_reference,
    strong_residual,
)
from gbenard.solver import ForcingSpec, PhysicsParams, assemble


@pytest.fixture(scope="module")
def case(basis_wavy):
    r = np.random.default_rng(5)
    return ManufacturedCase.from_modes(basis_wavy, 0.5 * r.standard_normal(8), 0.5 * r.standard_normal(8))


class TestCaputoPower:
    def test_values(self):
        assert caputo_power(1.0, 0.5, 1.0) == pytest.approx(1.1283791670955126, rel=1e-14)
        assert caputo_power(2.0, 0.5, 1.0) == pytest.approx(2 / 1.329340388179137, rel=1e-14)
        assert caputo_power(0.0, 0.5, 0.7) == 0.0

    def test_classical(self):
        assert caputo_power(3.0, 1.0, 2.0) == pytest.approx(12.0, rel=1e-14)

    def test_against_quadrature(self):
        q = definition_quadrature(lambda t: t**2.5, 0.3, 0.8, "caputo", fprime=lambda t: 2.5 * t**1.5)
        assert caputo_power(2.5, 0.3, 0.8) == pytest.approx(q, rel=1e-9)


class TestQuadrature:
    def test_integral_of_one(self):
        # I^alpha 1 = t^alpha / Gamma(alpha + 1)
        assert definition_quadrature(lambda s: 1.0, 0.5, 1.0) == pytest.approx(1.1283791670955126, rel=1e-10)

    def test_right_integral(self):
        assert definition_quadrature(lambda s: 1.0, 0.5, 0.75, "right_integral", t_end=1.0) == pytest.approx(0.5 * 1.1283791670955126, rel=1e-10)

    def test_edges(self):
        assert definition_quadrature(lambda s: 1.0, 0.5, 0.0) == 0.0
        assert definition_quadrature(lambda s: 1.0, 0.5, 1.0, "right_integral", t_end=1.0) == 0.0
        assert definition_quadrature(None, 1.0, 0.3, "caputo", fprime=lambda t: 7.0) == 7.0

    @pytest.mark.parametrize("kw", [dict(which="right_integral"), dict(which="caputo"), dict(which="hadamard")])
    def test_errors(self, kw):
        with pytest.raises(ValueError):
            definition_quadrature(lambda s: 1.0, 0.5, 0.5, **kw)


class TestClassicalReference:
    def test_linear_step_is_exact(self, basis_flat, rng):
        p = PhysicsParams(nu=0.2, kappa=0.3, alpha=1.0, xi=(0.0, 1.0))
        s = assemble(basis_flat, p)
        y = rng.standard_normal(s.dim)
        # with no advection in flat shear-free modes the step is one linear solve
        B0 = basis_flat.B.copy()
        basis_flat.B[...] = 0.0
        Bt0 = basis_flat.Bt.copy()
        basis_flat.Bt[...] = 0.0
        try:
            out = classical_boussinesq_step(y, basis_flat, p, ForcingSpec(), 0.1, 0.1)
        finally:
            basis_flat.B[...] = B0
            basis_flat.Bt[...] = Bt0
        ref = np.linalg.solve(np.eye(s.dim) / 0.1 + s.L, y / 0.1)
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-14)

    def test_newton_residual(self, basis_wavy, rng):
        p = PhysicsParams(nu=0.1, kappa=0.1, alpha=1.0)
        s = assemble(basis_wavy, p)
        y = 0.5 * rng.standard_normal(s.dim)
        out = classical_boussinesq_step(y, basis_wavy, p, ForcingSpec(), 0.05, 0.05)
        res = (out - y) / 0.05 - s.rhs(out, 0.05)
        assert np.abs(res).max() < 1e-10

    def test_richardson_second_order(self, basis_flat):
        p = PhysicsParams(nu=0.1, kappa=0.1, alpha=1.0, xi=(0.0, 0.0))
        s = assemble(basis_flat, p)
        y0 = np.zeros(s.dim)
        y0[:3] = 1e-7
        exact = expm(-s.L) @ y0
        errs = [np.abs(richardson_reference(y0, basis_flat, p, ForcingSpec(), 1.0, n)[-1] - exact).max() for n in (32, 64, 128)]
        orders = np.log2(np.array(errs[:-1]) / errs[1:])
        assert orders.min() > 1.9

    def test_trajectory_shape(self, basis_wavy):
        p = PhysicsParams(nu=0.1, kappa=0.1, alpha=1.0)
        out = classical_trajectory(np.zeros(16), basis_wavy, p, ForcingSpec(), 1.0, 5)
        assert out.shape == (6, 16) and np.all(out == 0)


class TestManufactured:
    def test_exact_coeffs(self, case):
        w, _ = case.basis.project_velocity(case.U)
        c = case.exact_coeffs(0.5)
        np.testing.assert_allclose(c[:8], 0.25 * w, atol=1e-10)

    def test_strong_residual_small(self, case):
        p = PhysicsParams(nu=0.1, kappa=0.1, alpha=0.5)
        r1, r2 = strong_residual(case, p, 0.7)
        f1, f2 = manufactured_fields(case, p, 0.7)
        assert r1 <= 1e-8 * np.sqrt(np.mean(f1**2)) and r2 <= 1e-8 * np.sqrt(np.mean(f2**2))

    def test_projected_forcing_matches_fields(self, case):
        p = PhysicsParams(nu=0.1, kappa=0.1, alpha=0.5)
        fs = manufactured_forcing(case, p)
        f1, f2 = manufactured_fields(case, p, 0.4)
        np.testing.assert_allclose(fs.velocity(0.4, 8), case.basis.project_velocity(f1)[0], atol=1e-10)
        np.testing.assert_allclose(fs.temperature(0.4, 8), case.basis.project_temperature(f2)[0], atol=1e-10)

    def test_weak_form_satisfied(self, case):
        # D^alpha y = F - L y - N(y) holds exactly for y = t^2 * y*
        p = PhysicsParams(nu=0.1, kappa=0.1, alpha=0.5)
        s = assemble(case.basis, p, manufactured_forcing(case, p))
        t = 0.6
        y = case.exact_coeffs(t)
        lhs = caputo_power(2.0, 0.5, t) * case.exact_coeffs(1.0)
        np.testing.assert_allclose(lhs, s.rhs(y, t), atol=1e-9)
