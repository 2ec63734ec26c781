import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gbenard.gdomain import (
    FieldShapeError,
    Grid2,
    GWeightError,
    dealias,
    div,
    g_divergence,
    grad,
    gram_g,
    h1_seminorm_g,
    inner_g,
    inverse_laplacian,
    laplacian,
    make_gweight,
    norm_g,
    pad,
    padded_size,
    read_snapshot,
    strip_nyquist,
    unpad,
    write_snapshot,
    write_snapshot_csv,
)

TP = 2 * np.pi


class TestGrid:
    @pytest.mark.parametrize("n", [4, 12, 48, 7.0])
    def test_rejects(self, n):
        with pytest.raises(ValueError):
            Grid2(n)

    def test_mesh_indexing(self, grid32):
        x, y = grid32.mesh
        assert x[3, 0] == 3 / 32 and y[0, 5] == 5 / 32

    def test_check(self, grid32):
        with pytest.raises(FieldShapeError):
            grid32.check(np.zeros((16, 16)))
        bad = np.zeros((32, 32))
        bad[1, 1] = np.nan
        with pytest.raises(FieldShapeError):
            grid32.check(bad)

    def test_spectral_derivatives(self, grid32):
        x, y = grid32.mesh
        a = np.sin(TP * 3 * x) * np.cos(TP * 2 * y)
        d = grad(a, grid32)
        np.testing.assert_allclose(d[0], TP * 3 * np.cos(TP * 3 * x) * np.cos(TP * 2 * y), atol=1e-11)
        np.testing.assert_allclose(d[1], -TP * 2 * np.sin(TP * 3 * x) * np.sin(TP * 2 * y), atol=1e-11)
        np.testing.assert_allclose(laplacian(a, grid32), -TP**2 * 13 * a, atol=1e-9)
        np.testing.assert_allclose(div(d, grid32), laplacian(a, grid32), atol=1e-9)

    def test_inverse_laplacian(self, grid32, rng):
        a = dealias(rng.standard_normal((32, 32)), grid32)
        a -= a.mean()
        np.testing.assert_allclose(-laplacian(inverse_laplacian(a, grid32), grid32), a, atol=1e-12)

    def test_nyquist_invisible_to_gradient(self, grid32):
        x, _ = grid32.mesh
        nyq = np.cos(TP * 16 * x)
        assert np.abs(grad(nyq, grid32)).max() < 1e-12
        assert np.abs(strip_nyquist(nyq)).max() < 1e-14

    def test_dealias_cutoff(self, grid32):
        x, y = grid32.mesh
        keep = np.cos(TP * 10 * x)
        drop = np.cos(TP * 11 * y)
        np.testing.assert_allclose(dealias(keep + drop, grid32), keep, atol=1e-13)

    def test_pad_roundtrip_and_products(self, grid32, rng):
        a = dealias(rng.standard_normal((2, 32, 32)), grid32)
        big = padded_size(32)
        assert big == 48
        np.testing.assert_allclose(unpad(pad(a, big), 32), a, atol=1e-13)
        x, _ = grid32.mesh
        # cos(2pi 10x)^2 has a k=20 part that aliases on 32 points but not on 48
        c = np.cos(TP * 10 * x)
        prod = unpad(pad(c, big) ** 2, 32)
        np.testing.assert_allclose(prod, 0.5 * np.ones_like(c), atol=1e-13)


class TestWeight:
    def test_sinusoidal_bounds(self, g_wavy32):
        g = g_wavy32
        assert g.m0 == pytest.approx(0.8, abs=1e-12)
        assert g.M0 == pytest.approx(1.2, abs=1e-12)
        assert g.grad_sup == pytest.approx(0.4 * np.pi, rel=1e-10)
        assert not g.is_constant

    def test_constant(self, g_flat32):
        assert g_flat32.is_constant and g_flat32.grad_sup == 0.0
        assert np.abs(g_flat32.log_gradient).max() == 0.0

    def test_non_positive(self, grid32):
        with pytest.raises(GWeightError, match="m0 violation"):
            make_gweight("sinusoidal", grid32, amplitude=1.5, check_smallness=False)

    def test_smallness(self, grid32):
        # |grad g| = 1.8 pi at amplitude 0.9, well past pi^2 m0^3 / M0
        with pytest.raises(GWeightError, match="smallness violation"):
            make_gweight("sinusoidal", grid32, amplitude=0.9)
        g = make_gweight("sinusoidal", grid32, amplitude=0.9, check_smallness=False)
        assert g.m0 == pytest.approx(0.1, abs=1e-12)

    def test_unknown_family(self, grid32):
        with pytest.raises(GWeightError):
            make_gweight("gaussian", grid32)

    def test_key_is_grid_independent(self, g_wavy32):
        other = g_wavy32.on(Grid2(64))
        assert other.key() == g_wavy32.key()
        assert other.grid.n == 64
        assert make_gweight("sinusoidal", Grid2(32), amplitude=0.1).key() != g_wavy32.key()


class TestInnerProducts:
    def test_weighted_norm(self, g_wavy32):
        x, _ = g_wavy32.grid.mesh
        # mean of (1 + 0.2 sin) sin^2 is 1/2
        assert norm_g(np.sin(TP * x), g_wavy32) == pytest.approx(np.sqrt(0.5), rel=1e-13)
        assert inner_g(np.ones_like(x), np.ones_like(x), g_wavy32) == pytest.approx(1.0, rel=1e-14)

    def test_h1(self, g_flat32):
        x, _ = g_flat32.grid.mesh
        assert h1_seminorm_g(np.sin(TP * x), g_flat32) == pytest.approx(TP * np.sqrt(0.5), rel=1e-12)

    def test_shape_mismatch(self, g_flat32):
        with pytest.raises(FieldShapeError):
            inner_g(np.zeros((2, 32, 32)), np.zeros((32, 32)), g_flat32)

    def test_gram_matches_pairs(self, g_wavy32, rng):
        A = rng.standard_normal((3, 2, 32, 32))
        B = rng.standard_normal((4, 2, 32, 32))
        G = gram_g(A, B, g_wavy32, 1)
        assert G.shape == (3, 4)
        assert G[2, 1] == pytest.approx(inner_g(A[2], B[1], g_wavy32), rel=1e-12)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_inner_symmetric_positive(self, seed):
        g = make_gweight("cosine_product", Grid2(16), amplitude=0.1)
        r = np.random.default_rng(seed)
        a, b = r.standard_normal((2, 16, 16))
        assert inner_g(a, b, g) == pytest.approx(inner_g(b, a, g), rel=1e-12, abs=1e-14)
        assert inner_g(a, a, g) > 0

    def test_weighted_divergence(self, g_wavy32):
        x, _ = g_wavy32.grid.mesh
        u = np.stack([np.ones_like(x), np.zeros_like(x)])
        np.testing.assert_allclose(g_divergence(u, g_wavy32), 0.4 * np.pi * np.cos(TP * x), atol=1e-11)
        with pytest.raises(FieldShapeError):
            g_divergence(np.zeros((3, 32, 32)), g_wavy32)


class TestSnapshots:
    def test_roundtrip_vector(self, tmp_path, rng):
        v = rng.standard_normal((2, 16, 16))
        write_snapshot(tmp_path / "u.bin", v, 0.25, 0.5)
        snap = read_snapshot(tmp_path / "u.bin")
        assert np.array_equal(snap.values, v)
        assert (snap.time, snap.alpha) == (0.25, 0.5)
        assert (tmp_path / "u.bin").stat().st_size == 24 + 8 * 2 * 256

    def test_roundtrip_scalar(self, tmp_path, rng):
        v = rng.standard_normal((8, 8))
        write_snapshot(tmp_path / "t.bin", v, 1.0, 1.0)
        assert np.array_equal(read_snapshot(tmp_path / "t.bin").values, v)

    def test_truncated(self, tmp_path):
        write_snapshot(tmp_path / "t.bin", np.zeros((8, 8)), 0.0, 0.5)
        data = (tmp_path / "t.bin").read_bytes()
        (tmp_path / "t.bin").write_bytes(data[:-8])
        with pytest.raises(ValueError):
            read_snapshot(tmp_path / "t.bin")

    def test_csv(self, tmp_path):
        grid = Grid2(8)
        write_snapshot_csv(tmp_path / "s.csv", np.ones((2, 8, 8)), grid)
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[0] == "x,y,c0,c1" and len(lines) == 65
