"""Transform, derivative, and quadrature checks for the mixed grid."""

import numpy as np
import pytest

from slabflow.grid import (
    SpectralGrid,
    random_bulk,
    random_surface,
)


@pytest.fixture
def grid():
    return SpectralGrid(L=2.0 * np.pi, n_x=64, n_z=17)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# construction


def test_grid_rejects_odd_or_tiny_sizes():
    with pytest.raises(ValueError):
        SpectralGrid(L=1.0, n_x=63, n_z=17)
    with pytest.raises(ValueError):
        SpectralGrid(L=1.0, n_x=64, n_z=4)
    with pytest.raises(ValueError):
        SpectralGrid(L=-1.0, n_x=64, n_z=17)
    with pytest.raises(ValueError):
        SpectralGrid(L=1.0, n_x=64, n_z=17, b=0.0)


def test_vertical_nodes_span_depth_with_endpoints(grid):
    assert grid.z[0] == 0.0
    assert grid.z[-1] == pytest.approx(-grid.b, abs=1e-15)
    assert np.all(np.diff(grid.z) < 0)


# ---------------------------------------------------------------------------
# transforms


def test_transform_of_zero_is_zero(grid):
    assert np.all(grid.to_hat(np.zeros(grid.n_x)) == 0)


def test_single_cosine_hits_one_coefficient(grid):
    f = np.cos(2.0 * np.pi * grid.x / grid.L)
    fh = grid.to_hat(f)
    # one-sided spectrum: cos(kx) = (1/2)(e^{ikx} + c.c.) keeps bin 1 only
    assert abs(fh[1] - 0.5) < 1e-14
    other = np.delete(np.abs(fh), 1)
    assert other.max() < 1e-14


def test_transform_round_trip(grid, rng):
    f = rng.standard_normal((grid.n_x, grid.n_z))
    err = np.abs(grid.from_hat(grid.to_hat(f)) - f).max()
    assert err <= 1e-12


def test_round_trip_on_large_grid(rng):
    g = SpectralGrid(L=400.0, n_x=512, n_z=65)
    f = rng.standard_normal((g.n_x, g.n_z))
    rel = np.abs(g.from_hat(g.to_hat(f)) - f).max() / np.abs(f).max()
    assert rel <= 1e-12


def test_parseval(grid, rng):
    f = rng.standard_normal(grid.n_x)
    phys = grid.integrate_x(f * f)
    fh = grid.to_hat(f)
    spec = grid.L * np.sum(grid.mode_weight * np.abs(fh) ** 2)
    assert abs(phys - spec) <= 1e-12 * max(phys, 1.0)


# ---------------------------------------------------------------------------
# derivatives


def test_dx_on_single_mode(grid):
    k = 2.0 * np.pi * 3 / grid.L
    f = np.sin(k * grid.x)
    err = np.abs(grid.dx(f) - k * np.cos(k * grid.x)).max()
    assert err < 1e-12 * k


def test_dx_of_constant_is_zero(grid):
    assert np.abs(grid.dx(np.ones(grid.n_x))).max() == 0.0


def test_dx_matches_eighth_order_differences():
    g = SpectralGrid(L=2.0 * np.pi, n_x=256, n_z=5)
    rng = np.random.default_rng(7)
    f = random_surface(g, rng, amplitude=1.0, n_modes=10)
    h = g.L / g.n_x
    # centered 8th-order stencil
    w = np.array([1 / 280, -4 / 105, 1 / 5, -4 / 5,
                  0.0, 4 / 5, -1 / 5, 4 / 105, -1 / 280])
    fd = sum(w[j] * np.roll(f, 4 - j) for j in range(9)) / h
    err = np.abs(g.dx(f) - fd).max()
    assert err <= 1e-6 * np.abs(f).max()


def test_dz_exact_on_linear_polynomial(grid):
    f = np.tile(1.0 + grid.z / grid.b, (grid.n_x, 1))
    df = grid.dz(f)
    assert np.abs(df - 1.0 / grid.b).max() < 1e-13


def test_dz_second_derivative_of_quadratic(grid):
    f = np.tile(grid.z ** 2, (grid.n_x, 1))
    assert np.abs(grid.dz(f, 2) - 2.0).max() < 1e-11


def test_dz_spectral_convergence():
    errs = []
    for n_z in (9, 17, 33):
        g = SpectralGrid(L=1.0, n_x=4, n_z=n_z)
        f = np.tile(np.exp(np.sin(2.0 * g.z)), (g.n_x, 1))
        exact = 2.0 * np.cos(2.0 * g.z) * np.exp(np.sin(2.0 * g.z))
        errs.append(np.abs(g.dz(f) - exact).max())
    # from 9 to 17 nodes the error collapses by five-plus orders, then sits
    # on the differentiation roundoff plateau
    assert errs[1] < 1e-5 * errs[0]
    assert errs[2] < 1e-9


def test_mixed_deriv_commutes(grid, rng):
    f = random_bulk(grid, rng)
    d1 = grid.dx(grid.dz(f))
    d2 = grid.dz(grid.dx(f))
    assert np.abs(d1 - d2).max() <= 1e-10 * np.abs(f).max()


# ---------------------------------------------------------------------------
# dealiasing


def test_product_is_alias_free(grid, rng):
    # band-limited factors; oracle = pointwise product on a 2x finer grid,
    # then truncated back to the coarse band
    f = random_surface(grid, rng, amplitude=1.0, n_modes=10)
    h = random_surface(grid, rng, amplitude=1.0, n_modes=10)
    fine = SpectralGrid(L=grid.L, n_x=2 * grid.n_x, n_z=grid.n_z)
    up = lambda q: fine.from_hat(
        np.concatenate([grid.to_hat(q), np.zeros(fine.n_k - grid.n_k)]))
    prod_fine = fine.to_hat(up(f) * up(h))[:grid.n_k]
    got = grid.to_hat(grid.product(f, h))
    mask = grid.dealias_mask.astype(bool)
    err = np.abs(got - prod_fine)[mask].max()
    assert err <= 1e-12
    # truncated bins only carry transform round-trip dust
    assert np.abs(got[~mask]).max() <= 1e-15


# ---------------------------------------------------------------------------
# quadrature and norms


def test_bulk_integral_of_one_is_volume(grid):
    vol = grid.integrate_bulk(np.ones((grid.n_x, grid.n_z)))
    assert vol == pytest.approx(grid.L * grid.b, rel=1e-13)


def test_clenshaw_curtis_integrates_polynomials_exactly(grid):
    # weights integrate the interpolant, so any poly of degree < n_z is exact
    f = np.tile(grid.z ** 6 - 2.0 * grid.z ** 3 + 0.5, (grid.n_x, 1))
    val = grid.integrate_z(f)[0]
    anti = np.polyint([1.0, 0, 0, -2.0, 0, 0, 0.5])
    ref = np.polyval(anti, 0.0) - np.polyval(anti, -grid.b)
    assert val == pytest.approx(ref, rel=1e-13)


def test_integration_by_parts_is_discretely_exact(grid, rng):
    # resolved fields: d/dz moves across the CC inner product up to the
    # boundary terms, to rounding
    f = random_bulk(grid, rng, z_degree=6)
    h = random_bulk(grid, rng, z_degree=6)
    lhs = grid.integrate_bulk(grid.dz(f) * h)
    rhs = (grid.integrate_x(f[:, 0] * h[:, 0])
           - grid.integrate_x(f[:, -1] * h[:, -1])
           - grid.integrate_bulk(f * grid.dz(h)))
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_surface_norm_of_single_mode(grid):
    kn = 2.0 * np.pi * 4 / grid.L
    f = np.cos(kn * grid.x)
    # |cos|_0^2 = L/2; multiplier (1+k^2)^s scales the nonzero bin
    for s in (0.0, 0.5, 2.0):
        want = 0.5 * grid.L * (1.0 + kn ** 2) ** s
        assert grid.surface_norm_sq(f, s) == pytest.approx(want, rel=1e-12)


def test_surface_norm_constant_independent_of_s(grid):
    f = np.full(grid.n_x, 0.7)
    vals = [grid.surface_norm_sq(f, s) for s in (0.0, 1.0, 3.5)]
    assert max(vals) - min(vals) <= 1e-12 * vals[0]


def test_surface_norm_interpolation_inequality(grid, rng):
    for _ in range(20):
        f = random_surface(grid, rng, amplitude=1.0, n_modes=20)
        half = grid.surface_norm_sq(f, 0.5)
        assert half ** 2 <= (grid.surface_norm_sq(f, 0.0)
                             * grid.surface_norm_sq(f, 1.0)) * (1 + 1e-12)


def test_surface_norm_monotone_in_s(grid, rng):
    f = random_surface(grid, rng)
    assert grid.surface_norm_sq(f, 1.0) >= grid.surface_norm_sq(f, 0.0)


def test_bulk_norm_decomposition(grid, rng):
    f = random_bulk(grid, rng)
    h1 = grid.bulk_norm_sq(f, 1)
    direct = (grid.bulk_l2_sq(f) + grid.bulk_l2_sq(grid.dx(f))
              + grid.bulk_l2_sq(grid.dz(f)))
    assert h1 == pytest.approx(direct, rel=1e-13)


def test_bulk_norm_matches_fine_quadrature(rng):
    g = SpectralGrid(L=3.0, n_x=32, n_z=17)
    fine = SpectralGrid(L=3.0, n_x=128, n_z=65)
    f = random_bulk(g, rng, n_modes=6, z_degree=6)
    # re-sample the same band-limited function on the fine grid
    fh = g.to_hat(f)
    pad = np.zeros((fine.n_k, g.n_z), dtype=complex)
    pad[:g.n_k] = fh
    fx = fine.from_hat(pad)
    coef = np.polynomial.chebyshev.chebfit(g.zeta, fx.T, g.n_z - 1)
    ff = np.polynomial.chebyshev.chebval(fine.zeta, coef)
    ref = fine.bulk_l2_sq(ff)
    assert g.bulk_l2_sq(f) == pytest.approx(ref, rel=1e-8)


def test_eval_z_reproduces_nodes(grid, rng):
    f = random_bulk(grid, rng)
    vals = grid.eval_z(f, grid.z)
    assert np.abs(vals - f).max() <= 1e-10 * np.abs(f).max()


def test_sobolev_multiplier_matches_norm(grid, rng):
    f = random_surface(grid, rng)
    via_mult = grid.surface_norm_sq(grid.surface_sobolev_multiplier(f, 1.5), 0.0)
    assert via_mult == pytest.approx(grid.surface_norm_sq(f, 1.5), rel=1e-11)


# ---------------------------------------------------------------------------
# random field helpers


def test_random_surface_is_mean_free_and_scaled(grid, rng):
    eta = random_surface(grid, rng, amplitude=0.05)
    assert abs(np.mean(eta)) <= 1e-15
    assert np.abs(eta).max() == pytest.approx(0.05, rel=1e-12)


def test_random_surface_zero_amplitude(grid, rng):
    assert np.all(random_surface(grid, rng, amplitude=0.0) == 0.0)


def test_random_bulk_bottom_zero_option(grid, rng):
    f = random_bulk(grid, rng, bottom_zero=True)
    assert np.abs(f[:, -1]).max() <= 1e-13
