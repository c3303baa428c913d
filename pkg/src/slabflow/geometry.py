"""Flattening geometry of the free surface and the pulled-back operators.

The moving domain bounded below by z = -b and above by the graph of eta is
mapped onto the fixed slab by

    Phi(x, z) = (x, z + phi(x, z)),   phi = (1 + z/b) * P eta,

where P is the smoothing extension given by the Fourier multiplier
exp(|k| z).  Writing J = d_z Phi_2 = 1 + d_z phi and K = 1/J, the matrix

    A = [[1, -K * d_x phi], [0, K]]

transforms gradients: (nabla_A f)_i = A_ij d_j f agrees with the spatial
gradient of f composed with the inverse flattening.  All fields live on the
fixed slab; derivatives of phi are evaluated in closed form from the
Fourier coefficients of eta, so the geometry itself carries no
differentiation error.
"""

from __future__ import annotations

import numpy as np

from .grid import SpectralGrid, DegenerateMapping


def poisson_extend(grid: SpectralGrid, eta: np.ndarray) -> np.ndarray:
    """Smoothing extension of a surface field into the slab.

    Mode n is damped by exp(|k_n| z); the result is harmonic, equals P eta
    on z = 0, and decays toward the bottom.
    """
    eh = grid.to_hat(eta)
    return grid.from_hat(eh[:, None] * np.exp(np.abs(grid.k)[:, None] * grid.z[None, :]))


class GeometryState:
    """Geometry of the flattening generated by a surface elevation.

    Exposes the fields entering the flattened operators (phi, its first
    derivatives, J, K, the nontrivial entries of A, the non-unit outward
    normal N = (-D eta, 1)) plus exact mixed derivatives of phi of any
    order through `phi_deriv`.
    """

    def __init__(self, grid: SpectralGrid, eta: np.ndarray, floor: float = 0.1):
        self.grid = grid
        self.eta = np.asarray(eta, dtype=float)
        self.eta_hat = grid.to_hat(self.eta)
        self._phi_cache: dict[tuple[int, int], np.ndarray] = {}

        self.eta_bar = self._eta_bar_deriv(0, 0)
        self.phi = self.phi_deriv(0, 0)
        self.Dphi = self.phi_deriv(1, 0)
        self.dphi_d = self.phi_deriv(0, 1)
        self.J = 1.0 + self.dphi_d
        min_j = float(np.min(self.J))
        if min_j <= floor:
            raise DegenerateMapping(
                f"flattening map degenerates: min J = {min_j:.4f} <= {floor}")
        self.K = 1.0 / self.J
        self.A12 = -self.Dphi * self.K
        self.A22 = self.K
        self.N1 = -grid.dx(self.eta)

    # ---- exact derivatives of the extension ------------------------------

    def _eta_bar_deriv(self, a: int, c: int) -> np.ndarray:
        g = self.grid
        absk = np.abs(g.k)
        mult = (1j * g.k) ** a * absk ** c
        if a % 2 == 1 and g.n_x % 2 == 0:
            mult = mult.copy()
            mult[-1] = 0.0
        fh = (self.eta_hat * mult)[:, None] * np.exp(absk[:, None] * g.z[None, :])
        return g.from_hat(fh)

    def phi_deriv(self, a: int, c: int) -> np.ndarray:
        """d_x^a d_z^c of phi = (1 + z/b) * P eta, computed in closed form."""
        key = (a, c)
        if key not in self._phi_cache:
            g = self.grid
            btilde = 1.0 + g.z / g.b
            out = btilde[None, :] * self._eta_bar_deriv(a, c)
            if c >= 1:
                out = out + (c / g.b) * self._eta_bar_deriv(a, c - 1)
            self._phi_cache[key] = out
        return self._phi_cache[key]

    def eta_deriv(self, a: int) -> np.ndarray:
        return self.grid.dx(self.eta, a)

    @property
    def min_J(self) -> float:
        return float(np.min(self.J))

    # surface traces of the geometry
    @property
    def K_surf(self) -> np.ndarray:
        return self.K[:, 0]

    @property
    def Deta(self) -> np.ndarray:
        return -self.N1


def build_geometry(grid: SpectralGrid, eta: np.ndarray,
                   floor: float = 0.1) -> GeometryState:
    """Construct the flattening geometry, raising DegenerateMapping when the
    Jacobian drops below `floor` anywhere in the slab."""
    return GeometryState(grid, eta, floor=floor)


class GeometryRate:
    """First time-derivative layer of the geometry for a given surface rate.

    All entries are literal time derivatives of the corresponding
    GeometryState fields when eta evolves with d_t eta = eta_t: the
    extension is linear in eta, so d_t phi = (1 + z/b) P eta_t.
    """

    def __init__(self, geom: GeometryState, eta_t: np.ndarray):
        self.geom = geom
        self.eta_t = np.asarray(eta_t, dtype=float)
        self._layer = GeometryState.__new__(GeometryState)
        # reuse the closed-form derivative machinery on the rate field
        self._layer.grid = geom.grid
        self._layer.eta = self.eta_t
        self._layer.eta_hat = geom.grid.to_hat(self.eta_t)
        self._layer._phi_cache = {}

        self.dt_phi = self._layer.phi_deriv(0, 0)
        self.dt_Dphi = self._layer.phi_deriv(1, 0)
        self.dt_dphi_d = self._layer.phi_deriv(0, 1)
        self.dt_J = self.dt_dphi_d
        self.dt_K = -geom.K ** 2 * self.dt_J
        self.dt_A12 = -(self.dt_Dphi * geom.K + geom.Dphi * self.dt_K)
        self.dt_A22 = self.dt_K
        self.dt_N1 = -geom.grid.dx(self.eta_t)

    def phi_t_deriv(self, a: int, c: int) -> np.ndarray:
        """d_x^a d_z^c of d_t phi, exact."""
        return self._layer.phi_deriv(a, c)


def dt_geometry(geom: GeometryState, eta_t: np.ndarray) -> GeometryRate:
    """Time-derivative layer of the geometry induced by a surface rate."""
    return GeometryRate(geom, eta_t)


# ---- flattened differential operators --------------------------------------


def grad_A_1(g: GeometryState, f: np.ndarray) -> np.ndarray:
    """First (horizontal) component of nabla_A f."""
    gr = g.grid
    return gr.dx(f) + gr.product(g.A12, gr.dz(f))


def grad_A_2(g: GeometryState, f: np.ndarray) -> np.ndarray:
    """Second (vertical) component of nabla_A f."""
    gr = g.grid
    return gr.product(g.K, gr.dz(f))


def grad_A(g: GeometryState, f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return grad_A_1(g, f), grad_A_2(g, f)


def div_A(g: GeometryState, u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
    return grad_A_1(g, u1) + grad_A_2(g, u2)


def lap_A(g: GeometryState, f: np.ndarray) -> np.ndarray:
    """Flattened Laplacian as div_A grad_A, assembled by double application."""
    return grad_A_1(g, grad_A_1(g, f)) + grad_A_2(g, grad_A_2(g, f))


def dsym_A(g: GeometryState, u1: np.ndarray, u2: np.ndarray):
    """Doubled symmetrized flattened gradient:
    (D_A u)_ij = A_il d_l u_j + A_jl d_l u_i (no factor 1/2)."""
    g1u1 = grad_A_1(g, u1)
    g2u1 = grad_A_2(g, u1)
    g1u2 = grad_A_1(g, u2)
    g2u2 = grad_A_2(g, u2)
    d11 = 2.0 * g1u1
    d12 = g1u2 + g2u1
    d22 = 2.0 * g2u2
    return d11, d12, d22


def stress_A(g: GeometryState, p: np.ndarray, u1: np.ndarray, u2: np.ndarray):
    """Flattened viscous stress S_A = p I - D_A u (unit viscosity)."""
    d11, d12, d22 = dsym_A(g, u1, u2)
    return p - d11, -d12, p - d22


def div_tensor_A(g: GeometryState, t11, t12, t21, t22):
    """(nabla_A . T)_i = A_jl d_l T_ij for a 2x2 tensor field."""
    r1 = grad_A_1(g, t11) + grad_A_2(g, t12)
    r2 = grad_A_1(g, t21) + grad_A_2(g, t22)
    return r1, r2


def div_stress_A(g: GeometryState, p: np.ndarray, u1: np.ndarray,
                 u2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Momentum operator in stress form: nabla_A p - nabla_A . (D_A u)."""
    d11, d12, d22 = dsym_A(g, u1, u2)
    v1, v2 = div_tensor_A(g, d11, d12, d12, d22)
    p1, p2 = grad_A(g, p)
    return p1 - v1, p2 - v2


def stress_normal_minus_eta(g: GeometryState, p: np.ndarray, u1: np.ndarray,
                            u2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Surface trace of S_A N - eta N with the non-unit normal N = (-D eta, 1)."""
    s11, s12, s22 = stress_A(g, p, u1, u2)
    n1 = g.N1
    r1 = (s11[:, 0] - g.eta) * n1 + s12[:, 0]
    r2 = s12[:, 0] * n1 + (s22[:, 0] - g.eta)
    return r1, r2


def piola_residual(g: GeometryState) -> float:
    """Max-norm of d_j (J A_ij) over both rows; vanishes in the continuum."""
    gr = g.grid
    # J A = [[J, -d_x phi], [0, 1]]
    row1 = gr.dx(g.J) + gr.dz(-g.Dphi)
    return float(np.max(np.abs(row1)))
