"""Mixed Fourier-Chebyshev discretization of the slab (0, L) x (-b, 0).

Horizontal direction: real FFT with angular wavenumbers k_n = 2*pi*n/L.
Vertical direction: Chebyshev-Gauss-Lobatto nodes mapped to [-b, 0], with
node 0 at the free surface z = 0 and node n_z-1 at the bottom z = -b.

Surface fields are arrays of shape (n_x,); bulk fields are (n_x, n_z).
Vertical derivatives go through Chebyshev coefficient space (DCT-I), which
keeps repeated differentiation usable up to the sixth order needed by the
high-order energy functionals.  Quadrature is trapezoid in x (exact for
trigonometric polynomials) and Clenshaw-Curtis in z (exact for the
polynomial interpolant), so discrete integration by parts of resolved
fields is exact up to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.fft
from numpy.polynomial import chebyshev as ncheb


class DegenerateMapping(ValueError):
    """Raised when the flattening map loses injectivity (J too small)."""


def _cheb_coeff(vals: np.ndarray, axis: int = -1) -> np.ndarray:
    """Chebyshev coefficients of the interpolant through CGL values."""
    m = vals.shape[axis]
    c = scipy.fft.dct(vals, type=1, axis=axis) / (m - 1)
    sl = [slice(None)] * vals.ndim
    sl[axis] = 0
    c[tuple(sl)] *= 0.5
    sl[axis] = m - 1
    c[tuple(sl)] *= 0.5
    return c


def _cheb_vals(c: np.ndarray, axis: int = -1) -> np.ndarray:
    """Evaluate Chebyshev series at the CGL nodes (inverse of _cheb_coeff)."""
    m = c.shape[axis]
    y = c.copy()
    sl = [slice(None)] * c.ndim
    sl[axis] = slice(1, m - 1)
    y[tuple(sl)] *= 0.5
    return scipy.fft.dct(y, type=1, axis=axis)


@dataclass(frozen=True)
class SpectralGrid:
    """Tensor-product collocation grid for the slab geometry.

    Parameters
    ----------
    L : horizontal period
    n_x : number of equispaced horizontal nodes (even)
    n_z : number of Chebyshev-Gauss-Lobatto nodes (>= 5)
    b : slab depth (> 0)
    dealias_fraction : kept fraction of the Fourier band for products
    """

    L: float
    n_x: int
    n_z: int
    b: float = 1.0
    dealias_fraction: float = 2.0 / 3.0

    def __post_init__(self):
        if self.n_x % 2 != 0 or self.n_x < 4:
            raise ValueError("n_x must be even and at least 4")
        if self.n_z < 5:
            raise ValueError("n_z must be at least 5")
        if self.b <= 0 or self.L <= 0:
            raise ValueError("L and b must be positive")

    # ---- nodes and wavenumbers -------------------------------------------

    @cached_property
    def x(self) -> np.ndarray:
        return np.arange(self.n_x) * (self.L / self.n_x)

    @cached_property
    def k(self) -> np.ndarray:
        """Angular wavenumbers 2*pi*n/L for the rfft modes."""
        return 2.0 * np.pi * np.fft.rfftfreq(self.n_x, d=self.L / self.n_x)

    @property
    def n_k(self) -> int:
        return self.n_x // 2 + 1

    @cached_property
    def zeta(self) -> np.ndarray:
        return np.cos(np.pi * np.arange(self.n_z) / (self.n_z - 1))

    @cached_property
    def z(self) -> np.ndarray:
        """Vertical nodes, z[0] = 0 (surface), z[-1] = -b (bottom)."""
        return self.b * (self.zeta - 1.0) / 2.0

    # ---- transforms -------------------------------------------------------

    def to_hat(self, f: np.ndarray) -> np.ndarray:
        """Fourier coefficients along axis 0, normalized so that a pure mode
        a*exp(i k x) has coefficient a."""
        return np.fft.rfft(f, axis=0) / self.n_x

    def from_hat(self, fh: np.ndarray) -> np.ndarray:
        return np.fft.irfft(fh * self.n_x, n=self.n_x, axis=0)

    @cached_property
    def mode_weight(self) -> np.ndarray:
        """Parseval weights for the one-sided rfft spectrum."""
        w = np.full(self.n_k, 2.0)
        w[0] = 1.0
        if self.n_x % 2 == 0:
            w[-1] = 1.0
        return w

    # ---- derivatives ------------------------------------------------------

    def dx(self, f: np.ndarray, order: int = 1) -> np.ndarray:
        """Spectral horizontal derivative; Nyquist zeroed for odd orders."""
        if order == 0:
            return f.copy()
        fh = np.fft.rfft(f, axis=0)
        mult = (1j * self.k) ** order
        if order % 2 == 1 and self.n_x % 2 == 0:
            mult = mult.copy()
            mult[-1] = 0.0
        shape = [1] * f.ndim
        shape[0] = self.n_k
        fh *= mult.reshape(shape)
        return np.fft.irfft(fh, n=self.n_x, axis=0)

    def dz(self, f: np.ndarray, order: int = 1) -> np.ndarray:
        """Chebyshev vertical derivative through coefficient space."""
        if order == 0:
            return f.copy()
        axis = f.ndim - 1
        c = _cheb_coeff(f, axis=axis)
        c = ncheb.chebder(c, m=order, scl=2.0 / self.b, axis=axis)
        pad = f.shape[axis] - c.shape[axis]
        widths = [(0, 0)] * f.ndim
        widths[axis] = (0, pad)
        c = np.pad(c, widths)
        return _cheb_vals(c, axis=axis)

    def deriv(self, f: np.ndarray, a: int, c: int) -> np.ndarray:
        """Mixed derivative d_x^a d_z^c of a bulk field."""
        out = self.dx(f, a) if a else f
        return self.dz(out, c) if c else (out.copy() if a == 0 else out)

    # ---- dealiasing and products -----------------------------------------

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        cutoff = self.dealias_fraction * (self.n_x // 2)
        return (np.arange(self.n_k) <= cutoff).astype(float)

    def dealias(self, f: np.ndarray) -> np.ndarray:
        fh = np.fft.rfft(f, axis=0)
        shape = [1] * f.ndim
        shape[0] = self.n_k
        fh *= self.dealias_mask.reshape(shape)
        return np.fft.irfft(fh, n=self.n_x, axis=0)

    def product(self, *factors: np.ndarray) -> np.ndarray:
        """Pointwise product followed by 2/3-rule truncation in x."""
        out = factors[0]
        for g in factors[1:]:
            out = out * g
        return self.dealias(out)

    # ---- quadrature -------------------------------------------------------

    @cached_property
    def w_zeta(self) -> np.ndarray:
        """Clenshaw-Curtis weights on [-1, 1]: integrate the interpolant."""
        m = self.n_z
        v = ncheb.chebvander(self.zeta, m - 1)
        j = np.arange(m).astype(float)
        with np.errstate(divide="ignore"):
            moments = np.where(j % 2 == 0, 2.0 / (1.0 - j ** 2), 0.0)
        return np.linalg.solve(v.T, moments)

    @cached_property
    def w_z(self) -> np.ndarray:
        return (self.b / 2.0) * self.w_zeta

    def integrate_z(self, f: np.ndarray) -> np.ndarray:
        """Integral over (-b, 0) along the last axis."""
        return f @ self.w_z

    def integrate_x(self, f: np.ndarray) -> np.ndarray:
        return (self.L / self.n_x) * np.sum(f, axis=0)

    def integrate_bulk(self, f: np.ndarray) -> float:
        return float(self.integrate_x(self.integrate_z(f)))

    def integrate_surface(self, f: np.ndarray) -> float:
        return float(self.integrate_x(f))

    # ---- norms ------------------------------------------------------------

    def surface_norm_sq(self, eta: np.ndarray, s: float = 0.0) -> float:
        """Squared H^s norm of a surface field, |f|_s^2 = L sum (1+k^2)^s |f_k|^2
        with Parseval weights for the one-sided spectrum."""
        eh = self.to_hat(eta)
        w = self.mode_weight * (1.0 + self.k ** 2) ** s
        return float(self.L * np.sum(w * np.abs(eh) ** 2))

    def bulk_l2_sq(self, f: np.ndarray) -> float:
        return self.integrate_bulk(f * f)

    def bulk_norm_sq(self, f: np.ndarray, r: int = 0) -> float:
        """Squared H^r norm: sum of L^2 norms of all derivatives up to order r."""
        total = 0.0
        for a in range(r + 1):
            for c in range(r + 1 - a):
                total += self.bulk_l2_sq(self.deriv(f, a, c))
        return total

    def sup_abs(self, f: np.ndarray) -> float:
        return float(np.max(np.abs(f)))

    # ---- interpolation helpers -------------------------------------------

    def eval_z(self, f: np.ndarray, z_targets: np.ndarray) -> np.ndarray:
        """Evaluate the Chebyshev interpolant of a bulk field at arbitrary z."""
        c = _cheb_coeff(f, axis=f.ndim - 1)
        zt = 2.0 * np.asarray(z_targets) / self.b + 1.0
        return ncheb.chebval(zt, c.T if f.ndim == 2 else c)

    def surface_sobolev_multiplier(self, eta: np.ndarray, s: float) -> np.ndarray:
        """Apply the Fourier multiplier (1+k^2)^(s/2) to a surface field."""
        eh = self.to_hat(eta)
        return self.from_hat(eh * (1.0 + self.k ** 2) ** (s / 2.0))


# ---- random band-limited fields ------------------------------------------


def random_surface(grid: SpectralGrid, rng: np.random.Generator,
                   amplitude: float = 0.1, n_modes: int = 8,
                   mean_zero: bool = True, decay: float = 0.5) -> np.ndarray:
    """Seeded band-limited surface field with geometric spectral decay,
    scaled so that the sup norm equals `amplitude`."""
    n_modes = min(n_modes, grid.n_k - 2)
    eh = np.zeros(grid.n_k, dtype=complex)
    for n in range(0 if not mean_zero else 1, n_modes + 1):
        c = rng.standard_normal() + 1j * rng.standard_normal()
        if n == 0:
            c = c.real
        eh[n] = c * decay ** n
    eta = grid.from_hat(eh)
    m = np.max(np.abs(eta))
    if m > 0 and amplitude > 0:
        eta *= amplitude / m
    elif amplitude == 0:
        eta[:] = 0.0
    return eta


def random_bulk(grid: SpectralGrid, rng: np.random.Generator,
                amplitude: float = 1.0, n_modes: int = 8,
                z_degree: int = 8, bottom_zero: bool = False,
                decay: float = 0.5) -> np.ndarray:
    """Seeded band-limited bulk field, smooth in both directions."""
    n_modes = min(n_modes, grid.n_k - 2)
    z_degree = min(z_degree, grid.n_z - 1)
    fh = np.zeros((grid.n_k, grid.n_z), dtype=complex)
    for n in range(n_modes + 1):
        cz = (rng.standard_normal(z_degree + 1)
              + 1j * rng.standard_normal(z_degree + 1))
        cz *= decay ** (n + np.arange(z_degree + 1))
        if n == 0:
            cz = cz.real.astype(complex)
        fh[n] = ncheb.chebval(grid.zeta, cz)
    f = grid.from_hat(fh)
    if bottom_zero:
        lam = ((1.0 - grid.zeta) / 2.0) ** 4
        f = f - np.outer(f[:, -1], lam)
    m = np.max(np.abs(f))
    if m > 0 and amplitude > 0:
        f *= amplitude / m
    elif amplitude == 0:
        f[:] = 0.0
    return f


def gaussian_lowpass_surface(grid: SpectralGrid, rng: np.random.Generator,
                             amplitude: float, k0: float = 0.5) -> np.ndarray:
    """Mean-free surface field with Gaussian spectrum exp(-(k/k0)^2) and
    random phases, sup-normalized to `amplitude`."""
    eh = np.zeros(grid.n_k, dtype=complex)
    phases = rng.uniform(0.0, 2.0 * np.pi, grid.n_k)
    for n in range(1, grid.n_k - 1):
        eh[n] = np.exp(-((grid.k[n] / k0) ** 2)) * np.exp(1j * phases[n])
    eta = grid.from_hat(eh)
    m = np.max(np.abs(eta))
    if m > 0:
        eta *= amplitude / m
    return eta
