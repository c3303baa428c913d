"""Quadratic interaction terms and commutator structure of the flattened flow.

The geometric formulation can be rewritten as the flat viscous
surface-wave problem with quadratic right-hand sides G1 (momentum), G2
(divergence), G3 (stress boundary row), G4 (kinematic boundary):

    d_t u + grad p - lap u = G1        in the slab,
    div u = G2                         in the slab,
    (p I - D u) e_d = eta e_d + G3     on z = 0,
    d_t eta = u_d + G4                 on z = 0.

This module assembles those terms, the commutators of tangential
derivatives with the flattened gradient (the cancellation that makes
highest-order surface derivatives tractable), the associated good
unknowns, and the pure-time interaction sums used when the problem is
differentiated in time.  Every formula is pinned by a dual-route residual:
the closed-form expression is compared against an independent assembly by
operator composition, either on spectral fields or in the pointwise jet
algebra of `formal` (which also covers the three-dimensional case).
"""

from __future__ import annotations

import math

import numpy as np

from . import geometry as geo
from .geometry import GeometryState, dt_geometry
from .formal import JetField, FormalGeometry, bracket1, bracket2


def _sup(*fields) -> float:
    return max(float(np.max(np.abs(f))) for f in fields)


# ---------------------------------------------------------------------------
# interaction terms on the spectral grid (d = 2)
# ---------------------------------------------------------------------------


def assemble_G(g: GeometryState, u1: np.ndarray, u2: np.ndarray,
               p: np.ndarray, eta_t: np.ndarray | None = None) -> dict:
    """Quadratic interaction terms of the perturbed-linear formulation.

    `eta_t` is the surface rate entering the time-derivative part of the
    coordinate change (the G1 term K d_t phi d_z u); omit it for states
    considered at frozen time.
    """
    gr = g.grid
    P = gr.product
    if eta_t is None:
        eta_t = np.zeros(gr.n_x)
    rate = dt_geometry(g, eta_t)
    phi_t = rate.dt_phi

    u1z, u2z, pz = gr.dz(u1), gr.dz(u2), gr.dz(p)

    # (I - A) grad p
    g11 = (-P(g.A12, pz), P(1.0 - g.K, pz))

    # -(u . grad_A) u
    def adv(f):
        return P(u1, geo.grad_A_1(g, f)) + P(u2, geo.grad_A_2(g, f))

    g12 = (-adv(u1), -adv(u2))

    # coefficient form of lap - lap_A acting on u: second-order part ...
    one_plus = 1.0 + P(g.Dphi, g.Dphi)
    c3a = P(g.K, g.K, one_plus) - 1.0
    c3b = -2.0 * P(g.K, g.Dphi)
    g13 = tuple(P(c3a, gr.dz(f, 2)) + P(c3b, gr.dx(gr.dz(f)))
                for f in (u1, u2))

    # ... and first-order part (derivatives of the geometry)
    dJ = g.phi_deriv(0, 2)
    DJ = g.phi_deriv(1, 1)
    DDphi = g.phi_deriv(2, 0)
    c4 = (-P(g.K, g.K, g.K, one_plus, dJ)
          + 2.0 * P(g.K, g.K, g.Dphi, DJ)
          - P(g.K, DDphi))
    g14 = (P(c4, u1z), P(c4, u2z))

    g15 = (P(g.K, phi_t, u1z), P(g.K, phi_t, u2z))

    G1 = (g11[0] + g12[0] + g13[0] + g14[0] + g15[0],
          g11[1] + g12[1] + g13[1] + g14[1] + g15[1])

    G2 = P(g.K, g.Dphi, u1z) + P(1.0 - g.K, u2z)

    # boundary rows: a = D eta, k = trace of K
    a = g.Deta
    k = g.K_surf
    tr = lambda f: f[:, 0]
    u1x, u2x = gr.dx(u1), gr.dx(u2)
    G3_1 = (a * (tr(p) - g.eta) + (k - 1.0) * tr(u1z) - a * k * tr(u2z)
            - a * (2.0 * tr(u1x) - 2.0 * a * k * tr(u1z)))
    G3_2 = (2.0 * (k - 1.0) * tr(u2z)
            - a * (tr(u2x) + k * tr(u1z) - a * k * tr(u2z)))
    G4 = -a * tr(u1)

    return {"G1": G1, "G2": G2, "G3": (G3_1, G3_2), "G4": G4,
            "phi_t": phi_t}


def g1_equivalence_residual(g: GeometryState, u1, u2, p, eta_t) -> float:
    """Relative gap between the flat momentum operator minus G1 and the
    geometric momentum operator (transport + pressure - viscosity, in
    Laplacian form), with the time-derivative slot cancelled."""
    gr = g.grid
    P = gr.product
    terms = assemble_G(g, u1, u2, p, eta_t)
    phi_t = terms["phi_t"]

    def flat(i, f):
        gp = gr.dx(p) if i == 0 else gr.dz(p)
        return gp - (gr.dx(f, 2) + gr.dz(f, 2)) - terms["G1"][i]

    def geometric(i, f):
        advect = P(u1, geo.grad_A_1(g, f)) + P(u2, geo.grad_A_2(g, f))
        gp = geo.grad_A_1(g, p) if i == 0 else geo.grad_A_2(g, p)
        return advect + gp - geo.lap_A(g, f) - P(g.K, phi_t, gr.dz(f))

    r, s = 0.0, 1e-300
    for i, f in ((0, u1), (1, u2)):
        lhs, rhs = flat(i, f), geometric(i, f)
        r = max(r, _sup(lhs - rhs))
        s = max(s, _sup(lhs), _sup(rhs))
    return r / s


def g2_equivalence_residual(g: GeometryState, u1, u2) -> float:
    gr = g.grid
    G2 = assemble_G(g, u1, u2, np.zeros_like(u1))["G2"]
    div_flat = gr.dx(u1) + gr.dz(u2)
    gap = G2 - (div_flat - geo.div_A(g, u1, u2))
    return _sup(gap) / max(_sup(div_flat, G2), 1e-300)


def g2_flux_form(g: GeometryState, u1: np.ndarray) -> np.ndarray:
    """Divergence interaction written as a pure flux:
    -D((J-1) u_h) + d_z(D phi u_h), equal to div u - J div_A u."""
    gr = g.grid
    return -gr.dx(gr.product(g.J - 1.0, u1)) + gr.dz(gr.product(g.Dphi, u1))


def g2_flux_residual(g: GeometryState, u1, u2) -> float:
    gr = g.grid
    flux = g2_flux_form(g, u1)
    div_flat = gr.dx(u1) + gr.dz(u2)
    target = div_flat - gr.product(g.J, geo.div_A(g, u1, u2))
    return _sup(flux - target) / max(_sup(div_flat, flux), 1e-300)


def g3_equivalence_residual(g: GeometryState, u1, u2, p) -> float:
    """Boundary-row identity: flat stress row minus G3 equals the geometric
    stress row S_A N - eta N, componentwise on the surface."""
    gr = g.grid
    G3 = assemble_G(g, u1, u2, p)["G3"]
    tr = lambda f: f[:, 0]
    u1z, u2z = gr.dz(u1), gr.dz(u2)
    flat1 = -(tr(gr.dx(u2)) + tr(u1z)) - G3[0]
    flat2 = tr(p) - 2.0 * tr(u2z) - g.eta - G3[1]
    geo1, geo2 = geo.stress_normal_minus_eta(g, p, u1, u2)
    scale = max(_sup(flat1, flat2, geo1, geo2), 1e-300)
    return max(_sup(flat1 - geo1), _sup(flat2 - geo2)) / scale


def g3_vertical_identity(g: GeometryState, u1, u2, p) -> float:
    """Sup of |p - eta - 2 d_z u_d - G3_d| on the surface.  This equals the
    vertical component of S_A N - eta N identically, so it is small exactly
    when the stress boundary condition holds."""
    gr = g.grid
    G3 = assemble_G(g, u1, u2, p)["G3"]
    val = p[:, 0] - g.eta - 2.0 * gr.dz(u2)[:, 0] - G3[1]
    return _sup(val)


def g4_equivalence_residual(g: GeometryState, u1, u2) -> float:
    G4 = assemble_G(g, u1, u2, np.zeros_like(u1))["G4"]
    u_dot_n = g.N1 * u1[:, 0] + u2[:, 0]
    return _sup((u2[:, 0] + G4) - u_dot_n) / max(_sup(u_dot_n), 1e-300)


# ---------------------------------------------------------------------------
# tangential-derivative commutators (horizontal powers on the grid)
# ---------------------------------------------------------------------------


def _e_field(g: GeometryState, i: int):
    """Symbol multiplying K-tilde in the flattened gradient row i."""
    return -g.Dphi if i == 0 else 1.0


def _grad_row(g: GeometryState, f: np.ndarray, i: int) -> np.ndarray:
    return geo.grad_A_1(g, f) if i == 0 else geo.grad_A_2(g, f)


def alinhac_C(g: GeometryState, f: np.ndarray, a: int, i: int) -> np.ndarray:
    """Lower-order commutator remainder for horizontal derivatives d_x^a.

    Vanishes identically for a = 1; for a >= 2 it collects every term of
    [d^a, A_il d_l] f in which f carries fewer than a tangential
    derivatives and no factor d^a phi appears undifferentiated.
    """
    gr = g.grid
    P = gr.product
    if a == 1:
        return np.zeros_like(f)
    e = _e_field(g, i)
    fz = gr.dz(f)
    Kt = g.K
    Ksq = P(Kt, Kt)

    def dal(h, order=a):
        return gr.dx(h, order)

    ek = P(e, Kt) if i == 0 else Kt.copy()
    out = dal(P(ek, fz)) - P(dal(ek), fz) - P(ek, dal(fz))
    if i == 0:
        br = dal(P(e, Kt)) - P(dal(e), Kt) - P(e, dal(Kt))
        out = out + P(br, fz)
    # single-bracket correction: [d^(a-1), K^2] d_x(d_z varphi), varphi = z + phi
    dJ = gr.dx(g.J)
    single = gr.dx(P(Ksq, dJ), a - 1) - P(Ksq, gr.dx(dJ, a - 1))
    return out - P(e, fz, single)


def com122_residual(g: GeometryState, f: np.ndarray, a: int, i: int):
    """Residual and scale of the good-unknown commutation identity
    d^a (nabla_A)_i f = (nabla_A)_i (d^a f - (nabla_A)_d f d^a phi)
                        + (nabla_A)_d (nabla_A)_i f d^a phi + C."""
    gr = g.grid
    P = gr.product
    phi_a = g.phi_deriv(a, 0)
    lhs = gr.dx(_grad_row(g, f, i), a)
    good = gr.dx(f, a) - P(geo.grad_A_2(g, f), phi_a)
    rhs = (_grad_row(g, good, i)
           + P(geo.grad_A_2(g, _grad_row(g, f, i)), phi_a)
           + alinhac_C(g, f, a, i))
    return _sup(lhs - rhs), max(_sup(lhs), _sup(rhs), 1e-300)


def com1_residual(g: GeometryState, f: np.ndarray, a: int, i: int):
    """Residual of the plain commutation form
    d^a (nabla_A)_i f = (nabla_A)_i d^a f - (nabla_A)_d f (nabla_A)_i d^a phi + C."""
    gr = g.grid
    P = gr.product
    phi_a = g.phi_deriv(a, 0)
    lhs = gr.dx(_grad_row(g, f, i), a)
    rhs = (_grad_row(g, gr.dx(f, a), i)
           - P(geo.grad_A_2(g, f), _grad_row(g, phi_a, i))
           + alinhac_C(g, f, a, i))
    return _sup(lhs - rhs), max(_sup(lhs), _sup(rhs), 1e-300)


def naive_commutator_magnitude(g: GeometryState, f: np.ndarray, a: int,
                               i: int) -> float:
    """Sup of d^a (nabla_A)_i f - (nabla_A)_i d^a f: the uncompensated
    commutator, which carries d^a of the geometry at top order."""
    gr = g.grid
    return _sup(gr.dx(_grad_row(g, f, i), a) - _grad_row(g, gr.dx(f, a), i))


def leibniz_commutator_residual(g: GeometryState, f: np.ndarray, i: int) -> float:
    """Brute-force check for a single derivative: [d_x, (nabla_A)_i] f equals
    the derivative of the coefficients applied to f."""
    gr = g.grid
    P = gr.product
    lhs = gr.dx(_grad_row(g, f, i)) - _grad_row(g, gr.dx(f), i)
    if i == 0:
        rhs = P(gr.dx(g.A12), gr.dz(f))
    else:
        rhs = P(gr.dx(g.K), gr.dz(f))
    return _sup(lhs - rhs)


# ---------------------------------------------------------------------------
# good unknowns
# ---------------------------------------------------------------------------


def good_unknown(g: GeometryState, f: np.ndarray, a: int) -> np.ndarray:
    """U^a = d^a f - (nabla_A)_d f * d^a phi."""
    gr = g.grid
    return gr.dx(f, a) - gr.product(geo.grad_A_2(g, f), g.phi_deriv(a, 0))


def q2_term(g: GeometryState, u1, u2, a: int) -> np.ndarray:
    """Divergence remainder Q2 = -sum_i C^a_i(u_i)."""
    return -(alinhac_C(g, u1, a, 0) + alinhac_C(g, u2, a, 1))


def div1_residual(g: GeometryState, u1, u2, a: int):
    """d^a(div_A u) = div_A U^a + (nabla_A)_d(div_A u) d^a phi - Q2."""
    gr = g.grid
    P = gr.product
    dv = geo.div_A(g, u1, u2)
    lhs = gr.dx(dv, a)
    rhs = (geo.div_A(g, good_unknown(g, u1, a), good_unknown(g, u2, a))
           + P(geo.grad_A_2(g, dv), g.phi_deriv(a, 0))
           - q2_term(g, u1, u2, a))
    return _sup(lhs - rhs), max(_sup(lhs), _sup(rhs), 1e-300)


def _dsym_tensor(g, u1, u2):
    d11, d12, d22 = geo.dsym_A(g, u1, u2)
    return ((d11, d12), (d12, d22))


def bordv1_residual(g: GeometryState, u1, u2, p, a: int):
    """Unconditional boundary rearrangement behind the stress-row remainder.

    For arbitrary fields, the tangential derivative of each entry of the
    surface stress D_A u - (p - eta) I expands through the good unknowns
    (trace of the summed commutation identity), and re-assembling the row
    against N with the Leibniz double bracket must reproduce
    d^a[(D_A u - (p - eta) I) N] exactly.  No boundary condition is used.
    """
    gr = g.grid
    P = gr.product
    tr = lambda h: h[:, 0]
    phi_a = g.phi_deriv(a, 0)
    T = _dsym_tensor(g, u1, u2)
    Ua = (good_unknown(g, u1, a), good_unknown(g, u2, a))
    TU = _dsym_tensor(g, Ua[0], Ua[1])
    C = [[alinhac_C(g, uj, a, i) for uj in (u1, u2)] for i in (0, 1)]
    E = [[C[i][j] + C[j][i] for j in range(2)] for i in range(2)]

    eta_a = gr.dx(g.eta, a)
    p_a = gr.dx(tr(p), a)
    pe = tr(p) - g.eta
    n = (g.N1, np.ones_like(g.N1))
    n_a = (gr.dx(g.N1, a), np.zeros_like(g.N1))

    res, scale = 0.0, 1e-300
    for i in range(2):
        acc = np.zeros(gr.n_x)
        for j in range(2):
            # trace of d^a(D_A u)_ij expanded through the good unknowns
            coms_ij = (tr(TU[i][j])
                       + tr(P(geo.grad_A_2(g, T[i][j]), phi_a))
                       + tr(E[i][j]))
            tij = tr(T[i][j]) - (pe if i == j else 0.0)
            dbracket = (gr.dx(tij * n[j], a) - gr.dx(tij, a) * n[j]
                        - tij * gr.dx(n[j], a))
            acc = acc + (coms_ij - (p_a - eta_a) * (1.0 if i == j else 0.0)) * n[j]
            acc = acc + tij * n_a[j] + dbracket
            acc = acc - gr.dx(tij * n[j], a)
        res = max(res, _sup(acc))
        scale = max(scale, _sup(p_a), _sup(tr(TU[i][i])), 1.0)
    return res, scale


def q3_term(g: GeometryState, u1, u2, p, a: int):
    """Boundary stress remainder in its stated form, with the non-normalized
    projector Pi = I - N (x) N.  This is the forcing of the differentiated
    stress row only for states satisfying the boundary condition; for
    arbitrary fields use `bordv1_residual`, which holds unconditionally.
    """
    gr = g.grid
    tr = lambda h: h[:, 0]
    eta_a = gr.dx(g.eta, a)
    T = [[tr(t) for t in row] for row in _dsym_tensor(g, u1, u2)]
    dzT = [[tr(geo.grad_A_2(g, t)) for t in row]
           for row in _dsym_tensor(g, u1, u2)]
    n = (g.N1, np.ones_like(g.N1))
    n_a = (gr.dx(g.N1, a), np.zeros_like(g.N1))
    C = [[alinhac_C(g, uj, a, i) for uj in (u1, u2)] for i in (0, 1)]
    E = [[tr(C[i][j] + C[j][i]) for j in range(2)] for i in range(2)]
    dap = tr(geo.grad_A_2(g, p))

    out = []
    for i in range(2):
        # row i of D_A u Pi, Pi_mj = delta_mj - n_m n_j
        tpi = [T[i][j] - (T[i][0] * n[0] + T[i][1] * n[1]) * n[j]
               for j in range(2)]
        term = -dap * eta_a * n[i]
        term = term - (tpi[0] * n_a[0] + tpi[1] * n_a[1])
        term = term - eta_a * (dzT[i][0] * n[0] + dzT[i][1] * n[1])
        db = sum(gr.dx(tpi[j] * n[j], a) - gr.dx(tpi[j], a) * n[j]
                 - tpi[j] * gr.dx(n[j], a) for j in range(2))
        term = term - db
        term = term - (E[i][0] * n[0] + E[i][1] * n[1])
        out.append(term)
    return out


def q4_term(g: GeometryState, u1, u2, a: int) -> np.ndarray:
    """Kinematic remainder
    Q4 = -u_h D d^a eta + (nabla_A)_d u . N d^a eta - [d^a, u_h, D eta]."""
    gr = g.grid
    tr = lambda h: h[:, 0]
    eta_a = gr.dx(g.eta, a)
    dau = (tr(geo.grad_A_2(g, u1)), tr(geo.grad_A_2(g, u2)))
    dan = dau[0] * g.N1 + dau[1]
    u1s = tr(u1)
    db = (gr.dx(u1s * g.Deta, a) - gr.dx(u1s, a) * g.Deta
          - u1s * gr.dx(g.Deta, a))
    return -u1s * gr.dx(eta_a) + dan * eta_a - db


def q4_residual(g: GeometryState, u1, u2, eta_t: np.ndarray, a: int):
    """Unconditional form: d^a(eta_t - u.N) = d^a eta_t - U^a.N - Q4 with the
    surface good unknown U^a = d^a u - (nabla_A)_d u d^a eta."""
    gr = g.grid
    tr = lambda h: h[:, 0]
    eta_a = gr.dx(g.eta, a)
    dau = (tr(geo.grad_A_2(g, u1)), tr(geo.grad_A_2(g, u2)))
    Us = (gr.dx(tr(u1), a) - dau[0] * eta_a, gr.dx(tr(u2), a) - dau[1] * eta_a)
    u_dot_n = tr(u1) * g.N1 + tr(u2)
    lhs = gr.dx(eta_t - u_dot_n, a)
    rhs = gr.dx(eta_t, a) - (Us[0] * g.N1 + Us[1]) - q4_term(g, u1, u2, a)
    return _sup(lhs - rhs), max(_sup(lhs), _sup(rhs), 1e-300)


def coms_residual(g: GeometryState, u1, u2, a: int):
    """Bulk identity for the symmetric gradient: each entry of d^a(D_A u)
    expands as D_A U^a + (nabla_A)_d(D_A u) d^a phi + E^a(u)."""
    gr = g.grid
    P = gr.product
    phi_a = g.phi_deriv(a, 0)
    T = _dsym_tensor(g, u1, u2)
    TU = _dsym_tensor(g, good_unknown(g, u1, a), good_unknown(g, u2, a))
    C = [[alinhac_C(g, uj, a, i) for uj in (u1, u2)] for i in (0, 1)]
    res, scale = 0.0, 1e-300
    for i in range(2):
        for j in range(2):
            lhs = gr.dx(T[i][j], a)
            rhs = (TU[i][j] + P(geo.grad_A_2(g, T[i][j]), phi_a)
                   + C[i][j] + C[j][i])
            res = max(res, _sup(lhs - rhs))
            scale = max(scale, _sup(lhs), _sup(rhs))
    return res, scale


# ---------------------------------------------------------------------------
# pure time derivatives: layered geometry and interaction sums
# ---------------------------------------------------------------------------


class TimeLayers:
    """Time-derivative layers of the geometry induced by surface rate layers.

    `eta_layers[m]` holds the m-th time derivative of the surface as an
    independent field; because the harmonic-type extension is linear, the
    m-th layer of phi is just the extension of `eta_layers[m]`.  Layers of
    K and of composite coefficients follow from the quotient rule, e.g.
    d_t K = -K^2 d_t J and d_t^2 K = 2 K^3 (d_t J)^2 - K^2 d_t^2 J.
    """

    def __init__(self, g: GeometryState, eta_layers):
        gr = g.grid
        P = gr.product
        self.g = g
        self.grid = gr
        self.n = len(eta_layers) - 1
        self.eta = list(eta_layers)
        rates = [dt_geometry(g, e) for e in eta_layers[1:]]
        # phi_t[m] is the (m+1)-th time derivative of phi
        self.phi_t = [r.dt_phi for r in rates]
        self.Dphi = [g.Dphi] + [r.dt_Dphi for r in rates]
        self.J = [g.J] + [r.dt_J for r in rates]
        K0 = g.K
        self.K = [K0]
        if self.n >= 1:
            self.K.append(-P(K0, K0, self.J[1]))
        if self.n >= 2:
            self.K.append(2.0 * P(K0, K0, K0, self.J[1], self.J[1])
                          - P(K0, K0, self.J[2]))
        self.A12 = [g.A12]
        if self.n >= 1:
            self.A12.append(-(P(self.Dphi[1], self.K[0])
                              + P(self.Dphi[0], self.K[1])))
        if self.n >= 2:
            self.A12.append(-(P(self.Dphi[2], self.K[0])
                              + 2.0 * P(self.Dphi[1], self.K[1])
                              + P(self.Dphi[0], self.K[2])))
        one = np.ones((gr.n_x, gr.n_z))
        zero = np.zeros((gr.n_x, gr.n_z))
        m = self.n + 1
        self.A = [[[one] + [zero] * self.n, self.A12],
                  [[zero] * m, self.K]]
        # layers of the coefficient K d_t phi (needs one more eta layer
        # than the geometry itself)
        self.Kphit = []
        for r in range(self.n):
            acc = np.zeros((gr.n_x, gr.n_z))
            for s in range(r + 1):
                acc = acc + math.comb(r, s) * P(self.K[s],
                                                self.phi_t[r - s])
            self.Kphit.append(acc)
        # surface normal layers
        self.n1 = [-gr.dx(e) for e in eta_layers]
        self.n2 = [np.ones(gr.n_x)] + [np.zeros(gr.n_x)] * self.n

    def a_layer(self, i, j, m):
        return self.A[i][j][m]

    def a_surf(self, i, j, m):
        return self.A[i][j][m][:, 0]


def _du_layers(gr, u_layers):
    """du[m][i][l] = spatial derivative l of component i at time layer m."""
    out = []
    for (f1, f2) in u_layers:
        out.append([[gr.dx(f1), gr.dz(f1)], [gr.dx(f2), gr.dz(f2)]])
    return out


def _dsym_layers(gr, tl: TimeLayers, du, m_max):
    """ds[m][i][j] = time layer m of (D_A u)_ij."""
    P = gr.product
    ds = []
    for m in range(m_max + 1):
        mat = [[np.zeros((gr.n_x, gr.n_z)) for _ in range(2)]
               for _ in range(2)]
        for i in range(2):
            for j in range(2):
                acc = np.zeros((gr.n_x, gr.n_z))
                for r in range(m + 1):
                    c = math.comb(m, r)
                    for l in range(2):
                        acc = acc + c * (P(tl.a_layer(i, l, r), du[m - r][j][l])
                                         + P(tl.a_layer(j, l, r), du[m - r][i][l]))
                mat[i][j] = acc
        ds.append(mat)
    return ds


def assemble_F(g: GeometryState, eta_layers, u_layers, p_layers,
               alpha0: int) -> dict:
    """Interaction sums forcing the problem differentiated alpha0 times in
    time (alpha0 = 1 or 2).

    `eta_layers` must reach layer alpha0 + 1 (the coefficient K d_t phi is
    itself differentiated alpha0 times), `u_layers` layer alpha0, and
    `p_layers` layer alpha0 - 1.
    """
    if alpha0 not in (1, 2):
        raise ValueError("alpha0 must be 1 or 2")
    if len(eta_layers) < alpha0 + 2:
        raise ValueError("need surface layers up to order alpha0 + 1")
    gr = g.grid
    P = gr.product
    tl = TimeLayers(g, eta_layers[:alpha0 + 2])
    du = _du_layers(gr, u_layers)
    dp = [[gr.dx(p), gr.dz(p)] for p in p_layers]
    ds = _dsym_layers(gr, tl, du, alpha0 - 1)
    tr = lambda h: h[:, 0]

    F1 = [np.zeros((gr.n_x, gr.n_z)) for _ in range(2)]
    F2 = np.zeros((gr.n_x, gr.n_z))
    F3 = [np.zeros(gr.n_x) for _ in range(2)]
    F4 = np.zeros(gr.n_x)
    nl = (tl.n1, tl.n2)

    for b in range(1, alpha0 + 1):
        c = float(math.comb(alpha0, b))
        m = alpha0 - b
        for i in range(2):
            acc = c * P(tl.Kphit[b], du[m][i][1])
            # outer div_A of the beta-differentiated symmetric combination
            s = []
            for j in range(2):
                sj = np.zeros((gr.n_x, gr.n_z))
                for l in range(2):
                    sj = sj + (P(tl.a_layer(i, l, b), du[m][j][l])
                               + P(tl.a_layer(j, l, b), du[m][i][l]))
                s.append(sj)
            acc = acc + c * geo.div_A(g, s[0], s[1])
            for j in range(2):
                for l in range(2):
                    dk = gr.dx(ds[m][i][j]) if l == 0 else gr.dz(ds[m][i][j])
                    acc = acc + c * P(tl.a_layer(j, l, b), dk)
            for k in range(2):
                ua_b = np.zeros((gr.n_x, gr.n_z))
                for r in range(b + 1):
                    cb = math.comb(b, r)
                    for j in range(2):
                        ua_b = ua_b + cb * P(u_layers[r][j],
                                             tl.a_layer(j, k, b - r))
                acc = acc - c * P(ua_b, du[m][i][k])
                acc = acc - c * P(tl.a_layer(i, k, b), dp[m][k])
            F1[i] = F1[i] + acc

        for i in range(2):
            for j in range(2):
                F2 = F2 - c * P(tl.a_layer(i, j, b), du[m][i][j])

        pe_m = tr(p_layers[m]) - eta_layers[m]
        for i in range(2):
            if i == 0:
                F3[i] = F3[i] + c * gr.dx(eta_layers[b]) * pe_m
            for j in range(2):
                for mm in range(2):
                    na_b = np.zeros(gr.n_x)
                    nb_b = np.zeros(gr.n_x)
                    for r in range(b + 1):
                        cb = math.comb(b, r)
                        na_b = na_b + cb * nl[j][r] * tl.a_surf(i, mm, b - r)
                        nb_b = nb_b + cb * nl[j][r] * tl.a_surf(j, mm, b - r)
                    F3[i] = F3[i] + c * (na_b * tr(du[m][j][mm])
                                         + nb_b * tr(du[m][i][mm]))

        F4 = F4 - c * gr.dx(eta_layers[b]) * tr(u_layers[m][0])

    return {"F1": tuple(F1), "F2": F2, "F3": tuple(F3), "F4": F4, "tl": tl}


def momentum_forcing_residual(g, eta_layers, u_layers, p_layers, alpha0,
                              u_top):
    """Differentiate-then-assemble against assemble-then-differentiate for
    the momentum equation: the alpha0-th time layer of the geometric
    momentum operator must equal the same operator applied to the top
    layers minus F1.  `u_top` fills the d_t^(alpha0+1) u slot, which
    appears identically on both sides."""
    gr = g.grid
    P = gr.product
    F = assemble_F(g, eta_layers, u_layers, p_layers, alpha0)
    tl = F["tl"]
    du = _du_layers(gr, u_layers)
    dp = [[gr.dx(p), gr.dz(p)] for p in p_layers]
    ds = _dsym_layers(gr, tl, du, alpha0)

    # layers of u_j A_jk up to alpha0
    def ua_layer(r, k):
        acc = np.zeros((gr.n_x, gr.n_z))
        for s in range(r + 1):
            cb = math.comb(r, s)
            for j in range(2):
                acc = acc + cb * P(u_layers[s][j], tl.a_layer(j, k, r - s))
        return acc

    res, scale = 0.0, 1e-300
    for i in range(2):
        lhs = u_top[i].copy()
        for r in range(alpha0 + 1):
            c = float(math.comb(alpha0, r))
            m = alpha0 - r
            lhs = lhs - c * P(tl.Kphit[r], du[m][i][1])
            for k in range(2):
                lhs = lhs + c * P(ua_layer(r, k), du[m][i][k])
                lhs = lhs + c * P(tl.a_layer(i, k, r), dp[m][k])
                for j in range(2):
                    dk = (gr.dx(ds[m][i][j]) if k == 0
                          else gr.dz(ds[m][i][j]))
                    lhs = lhs - c * P(tl.a_layer(j, k, r), dk)

        ut = u_layers[alpha0]
        pt = p_layers[alpha0]
        rhs = (u_top[i] - P(tl.Kphit[0], gr.dz(ut[i]))
               + P(u_layers[0][0], geo.grad_A_1(g, ut[i]))
               + P(u_layers[0][1], geo.grad_A_2(g, ut[i]))
               + (geo.grad_A_1(g, pt) if i == 0 else geo.grad_A_2(g, pt)))
        dst = geo.dsym_A(g, ut[0], ut[1])
        T = ((dst[0], dst[1]), (dst[1], dst[2]))
        for j in range(2):
            rhs = rhs - (geo.grad_A_1(g, T[i][j]) if j == 0
                         else geo.grad_A_2(g, T[i][j]))
        rhs = rhs - F["F1"][i]
        res = max(res, _sup(lhs - rhs))
        scale = max(scale, _sup(lhs), _sup(rhs))
    return res, scale


def div_forcing_residual(g, eta_layers, u_layers, alpha0):
    """div_A(d_t^alpha0 u) = d_t^alpha0(div_A u) + F2."""
    gr = g.grid
    P = gr.product
    F = assemble_F(g, eta_layers, u_layers,
                   [np.zeros((gr.n_x, gr.n_z))] * alpha0, alpha0)
    tl = F["tl"]
    du = _du_layers(gr, u_layers)
    full = np.zeros((gr.n_x, gr.n_z))
    for r in range(alpha0 + 1):
        c = float(math.comb(alpha0, r))
        for i in range(2):
            for j in range(2):
                full = full + c * P(tl.a_layer(i, j, r),
                                    du[alpha0 - r][i][j])
    lhs = geo.div_A(g, u_layers[alpha0][0], u_layers[alpha0][1])
    rhs = full + F["F2"]
    return _sup(lhs - rhs), max(_sup(lhs), _sup(rhs), 1e-300)


def stress_bc_forcing_residual(g, eta_layers, u_layers, p_layers, alpha0):
    """(d_t^a p - d_t^a eta) N - D_A(d_t^a u) N
       = d_t^a[(p - eta) N - D_A u N] + F3 on the surface."""
    gr = g.grid
    F = assemble_F(g, eta_layers, u_layers, p_layers, alpha0)
    tl = F["tl"]
    du = _du_layers(gr, u_layers)
    ds = _dsym_layers(gr, tl, du, alpha0)
    tr = lambda h: h[:, 0]
    nl = (tl.n1, tl.n2)

    pe = [tr(p_layers[m]) - eta_layers[m] for m in range(alpha0 + 1)]
    res, scale = 0.0, 1e-300
    for i in range(2):
        n0 = nl[i][0]
        lhs = pe[alpha0] * n0
        dst = geo.dsym_A(g, u_layers[alpha0][0], u_layers[alpha0][1])
        T = ((dst[0], dst[1]), (dst[1], dst[2]))
        for j in range(2):
            lhs = lhs - tr(T[i][j]) * nl[j][0]
        rhs = np.zeros(gr.n_x)
        for r in range(alpha0 + 1):
            c = float(math.comb(alpha0, r))
            rhs = rhs + c * pe[r] * nl[i][alpha0 - r]
            for j in range(2):
                rhs = rhs - c * tr(ds[r][i][j]) * nl[j][alpha0 - r]
        rhs = rhs + F["F3"][i]
        res = max(res, _sup(lhs - rhs))
        scale = max(scale, _sup(lhs), _sup(rhs))
    return res, scale


def kinematic_forcing_residual(g, eta_layers, u_layers, alpha0):
    """d_t(d_t^a eta) - d_t^a u . N = d_t^a(d_t eta - u . N) + F4."""
    gr = g.grid
    F = assemble_F(g, eta_layers, u_layers,
                   [np.zeros((gr.n_x, gr.n_z))] * alpha0, alpha0)
    tl = F["tl"]
    tr = lambda h: h[:, 0]
    lhs = (eta_layers[alpha0 + 1]
           - (tr(u_layers[alpha0][0]) * tl.n1[0] + tr(u_layers[alpha0][1])))
    rhs = eta_layers[alpha0 + 1].copy()
    for r in range(alpha0 + 1):
        c = float(math.comb(alpha0, r))
        rhs = rhs - c * (tr(u_layers[r][0]) * tl.n1[alpha0 - r]
                         + tr(u_layers[r][1]) * tl.n2[alpha0 - r])
    rhs = rhs + F["F4"]
    return _sup(lhs - rhs), max(_sup(lhs), _sup(rhs), 1e-300)


def f21_cross_check(g: GeometryState, u1, u2, u1_t, u2_t, eta_t):
    """First-order divergence forcing against the rate of the geometry:
    d_t(div_A u) - div_A(d_t u) assembled from the coordinate-change rate
    must equal -F2 at order one."""
    gr = g.grid
    P = gr.product
    rate = dt_geometry(g, eta_t)
    zero = np.zeros((gr.n_x, gr.n_z))
    eta_layers = [g.eta, eta_t, np.zeros(gr.n_x)]
    F2 = assemble_F(g, eta_layers, [(u1, u2), (u1_t, u2_t)], [zero], 1)["F2"]
    dt_div = (P(rate.dt_A12, gr.dz(u1)) + P(rate.dt_K, gr.dz(u2))
              + geo.div_A(g, u1_t, u2_t))
    lhs = dt_div - geo.div_A(g, u1_t, u2_t)
    return _sup(lhs + F2), max(_sup(dt_div), _sup(F2), 1e-300)


# ---------------------------------------------------------------------------
# surface transport of smoothed height
# ---------------------------------------------------------------------------


def smoothed_height_rate(grid, eta, u1_surf, u2_surf, s: float = 4.5):
    """Time derivative of the s-smoothed surface height: applying the
    Bessel multiplier to the kinematic equation and commuting it past the
    horizontal transport gives

        d_t (J^s eta) = -u_h . D (J^s eta) + J^s u_d - [J^s, u_h] D eta,

    which reduces to u . N at s = 0."""
    js = lambda f: grid.surface_sobolev_multiplier(f, s)
    deta = grid.dx(eta)
    comm = js(u1_surf * deta) - u1_surf * js(deta)
    return -u1_surf * grid.dx(js(eta)) + js(u2_surf) - comm


def transport_identity_residual(grid, eta, u1_surf, u2_surf, s: float):
    """With d_t eta slaved to u . N, the smoothed-height evolution is an
    identity; both multipliers act diagonally in frequency so the residual
    is at rounding level."""
    js = lambda f: grid.surface_sobolev_multiplier(f, s)
    eta_t = u2_surf - u1_surf * grid.dx(eta)
    lhs = js(eta_t)
    rhs = smoothed_height_rate(grid, eta, u1_surf, u2_surf, s)
    return _sup(lhs - rhs) / max(_sup(lhs), _sup(rhs), 1e-300)


def kato_ponce_ratio(grid, f, h, s: float) -> float:
    """Empirical constant in the commutator bound
    |[J^s, f] h|_0 <= C (sup|Df| |h|_{s-1} + |f|_s sup|h|)."""
    js = lambda q: grid.surface_sobolev_multiplier(q, s)
    comm = js(f * h) - f * js(h)
    num = math.sqrt(grid.surface_norm_sq(comm, 0.0))
    den = (_sup(grid.dx(f)) * math.sqrt(grid.surface_norm_sq(h, s - 1.0))
           + math.sqrt(grid.surface_norm_sq(f, s)) * _sup(h))
    return num / max(den, 1e-300)


# ---------------------------------------------------------------------------
# pointwise jet-algebra route (covers the three-dimensional case)
# ---------------------------------------------------------------------------


def _jet_zero(ndir, cap):
    return JetField.constant(0.0, ndir, cap)


def _formal_G_terms(G: FormalGeometry, u, p, eta_val: float):
    """Interaction terms from their closed-form expressions, on jets.

    Returns bulk values (G1, G2) and surface-row values (G3, G4); eta
    enters only through p - eta, and the surface slope slots are filled
    with the jet values of D phi, matching the geometric side exactly.
    """
    d = G.d
    zdir = G.zdir
    K = G.K
    hdirs = G.hdirs

    Dphi = [G.phi.d(h) for h in hdirs]
    speed2 = None
    for dp in Dphi:
        speed2 = dp * dp if speed2 is None else speed2 + dp * dp
    one_plus = speed2 + 1.0

    uz = [ui.d(zdir) for ui in u]
    G1 = []
    for i in range(d):
        # (I - A) grad p, row i
        arow = G.A_row(i)
        g11 = p.d(G.sdir(i)) * 1.0
        for l in range(d):
            g11 = g11 - arow[l] * p.d(G.sdir(l))
        # -(u . grad_A) u_i
        g12 = _jet_zero(G.ndir, 0)
        gra = G.grad_A(u[i])
        for j in range(d):
            g12 = g12 - u[j] * gra[j]
        g13 = (K * K * one_plus - 1.0) * u[i].d(zdir, 2)
        for h in hdirs:
            g13 = g13 - 2.0 * K * G.phi.d(h) * u[i].d(h).d(zdir)
        c4 = K * K * K * one_plus * G.phi.d(zdir, 2) * (-1.0)
        for h in hdirs:
            c4 = c4 + 2.0 * K * K * G.phi.d(h) * G.phi.d(h).d(zdir)
            c4 = c4 - K * G.phi.d(h, 2)
        g14 = c4 * uz[i]
        g15 = K * G.phi.d(G.tdir) * uz[i]
        G1.append(g11 + g12 + g13 + g14 + g15)

    G2 = (1.0 - K) * uz[d - 1] * 1.0
    for hi, h in enumerate(hdirs):
        G2 = G2 + K * G.phi.d(h) * uz[hi]

    # boundary rows with slope slots a_h = d_h phi and k = K (values)
    a = [dp.value for dp in Dphi]
    k = K.value
    pv = p.value
    duv = [[u[i].d(G.sdir(l)).value for l in range(d)] for i in range(d)]
    pe = pv - eta_val
    G3 = []
    if d == 2:
        A = a[0]
        G3.append(A * pe + (k - 1.0) * duv[0][1] - A * k * duv[1][1]
                  - A * (2.0 * duv[0][0] - 2.0 * A * k * duv[0][1]))
        G3.append(2.0 * (k - 1.0) * duv[1][1]
                  - A * (duv[1][0] + k * duv[0][1] - A * k * duv[1][1]))
    else:
        A, B = a[0], a[1]
        sym12 = (duv[0][1] + duv[1][0] - A * k * duv[1][2]
                 - B * k * duv[0][2])
        G3.append(A * pe + (k - 1.0) * duv[0][2] - A * k * duv[2][2]
                  - A * (2.0 * duv[0][0] - 2.0 * A * k * duv[0][2])
                  - B * sym12)
        G3.append(B * pe + (k - 1.0) * duv[1][2] - B * k * duv[2][2]
                  - B * (2.0 * duv[1][1] - 2.0 * B * k * duv[1][2])
                  - A * sym12)
        G3.append(2.0 * (k - 1.0) * duv[2][2]
                  - A * (k * duv[0][2] + duv[2][0] - A * k * duv[2][2])
                  - B * (k * duv[1][2] + duv[2][1] - B * k * duv[2][2]))
    G4 = -sum(a[i] * u[i].value for i in range(d - 1))
    return G1, G2, G3, G4


def formal_g_residuals(d: int, seed: int = 0) -> dict:
    """Dual-route residuals for all four interaction terms on jets in
    dimension d (2 or 3): closed forms against operator composition."""
    rng = np.random.default_rng(seed)
    G = FormalGeometry(rng, d=d, cap=4, scale=0.25)
    u = [JetField.random(rng, G.ndir, 3, scale=0.4) for _ in range(d)]
    p = JetField.random(rng, G.ndir, 3, scale=0.4)
    eta_val = float(rng.normal(0.0, 0.3))
    G1, G2, G3, G4 = _formal_G_terms(G, u, p, eta_val)

    out = {}
    # momentum row: flat minus G1 against geometric (Laplacian form)
    r1 = 0.0
    for i in range(d):
        flat = p.d(G.sdir(i)) - G.flat_lap(u[i]) - G1[i]
        adv = _jet_zero(G.ndir, 0)
        gra = G.grad_A(u[i])
        for j in range(d):
            adv = adv + u[j] * gra[j]
        geom = (adv + G.grad_A(p)[i] - G.lap_A(u[i])
                - G.K * G.phi.d(G.tdir) * u[i].d(G.zdir))
        r1 = max(r1, abs(flat.value - geom.value))
    out["g1"] = r1

    div_flat = _jet_zero(G.ndir, 0)
    for i in range(d):
        div_flat = div_flat + u[i].d(G.sdir(i))
    out["g2"] = abs((G2 - (div_flat - G.div_A(u))).value)

    # stress rows: flat row minus G3 against S_A N - eta N
    n = G.normal()
    dsym = [[G.grad_A(u[j])[i] + G.grad_A(u[i])[j] for j in range(d)]
            for i in range(d)]
    r3 = 0.0
    for i in range(d):
        if i == d - 1:
            flat_row = p.value - 2.0 * u[d - 1].d(G.zdir).value - eta_val
        else:
            flat_row = -(u[i].d(G.zdir).value + u[d - 1].d(G.sdir(i)).value)
        geom_row = -eta_val * n[i].value
        for j in range(d):
            sij = (p.value if i == j else 0.0) - dsym[i][j].value
            geom_row = geom_row + sij * n[j].value
        r3 = max(r3, abs(flat_row - G3[i] - geom_row))
    out["g3"] = r3

    u_dot_n = sum(u[i].value * n[i].value for i in range(d))
    out["g4"] = abs(u[d - 1].value + G4 - u_dot_n)
    return out


def _formal_C_term(G: FormalGeometry, f: JetField, alpha, i: int) -> JetField:
    """Commutator remainder C^alpha_i(f) on jets; alpha is a multi-index
    over (t, horizontal) directions, i indexes the gradient row with
    i = d - 1 the vertical one."""
    full = tuple(alpha) + (0,)
    if sum(alpha) <= 1:
        return _jet_zero(G.ndir, 0)
    dal = lambda h: h.dmulti(full)
    fz = f.d(G.zdir)
    K = G.K
    Ksq = K * K
    vertical = (i == G.d - 1)
    e = JetField.constant(1.0, G.ndir, K.cap) if vertical \
        else G.phi.d(G.hdirs[i]) * (-1.0)
    out = bracket2(dal, e * K, fz)
    if not vertical:
        out = out + bracket2(dal, e, K) * fz
    first = next(j for j, aj in enumerate(alpha) if aj > 0)
    rest = list(alpha)
    rest[first] -= 1
    dal_rest = lambda h: h.dmulti(tuple(rest) + (0,))
    unit = [0] * G.ndir
    unit[first] = 1
    dJ = G.J.dmulti(tuple(unit))
    out = out - e * fz * bracket1(dal_rest, Ksq, dJ)
    return out


def formal_alinhac_residuals(d: int, alpha, i: int, seed: int = 0):
    """Both commutation forms on jets for a tangential multi-index alpha
    over (t, x_h); returns (com1 residual, com122 residual, scale)."""
    rng = np.random.default_rng(seed)
    n = sum(alpha)
    G = FormalGeometry(rng, d=d, cap=n + 3, scale=0.25)
    f = JetField.random(rng, G.ndir, n + 2, scale=0.5)
    full = tuple(alpha) + (0,)
    dal = lambda h: h.dmulti(full)
    phi_a = G.phi.dmulti(full)
    C = _formal_C_term(G, f, alpha, i)

    row = G.grad_A(f)[i]
    daf = G.K * f.d(G.zdir)
    lhs = dal(row)
    com1 = G.grad_A(dal(f))[i] - daf * G.grad_A(phi_a)[i] + C
    good = dal(f) - daf * phi_a
    com122 = G.grad_A(good)[i] + (G.K * row.d(G.zdir)) * phi_a + C

    scale = max(abs(lhs.value), 1.0)
    return (abs((lhs - com1).value), abs((lhs - com122).value), scale)


def formal_transport_residual(d: int, alpha, seed: int = 0):
    """Transport commutator on jets: the remainder defined by the
    commutation property of T = d_t + u_h . D + U_d d_z against its
    closed-form expansion.  alpha ranges over (t, x_h) with |alpha| <= 2."""
    rng = np.random.default_rng(seed)
    n = sum(alpha)
    G = FormalGeometry(rng, d=d, cap=n + 3, scale=0.25)
    u = [JetField.random(rng, G.ndir, n + 2, scale=0.4) for _ in range(d)]
    f = JetField.random(rng, G.ndir, n + 2, scale=0.5)
    full = tuple(alpha) + (0,)
    dal = lambda h: h.dmulti(full)

    K = G.K
    nvec = G.normal()
    u_dot_n = u[0] * nvec[0]
    for i in range(1, d):
        u_dot_n = u_dot_n + u[i] * nvec[i]
    w = u_dot_n - G.phi.d(G.tdir)
    Ud = K * w

    def transport(h):
        out = h.d(G.tdir) + Ud * h.d(G.zdir)
        for hi, hd in enumerate(G.hdirs):
            out = out + u[hi] * h.d(hd)
        return out

    fz = f.d(G.zdir)
    daf = K * fz
    phi_a = G.phi.dmulti(full)
    u_dan = _jet_zero(G.ndir, 0)
    for hi, hd in enumerate(G.hdirs):
        u_dan = u_dan - u[hi] * G.phi.d(hd).dmulti(full)
    c_def = (dal(transport(f)) - transport(dal(f))
             - (u_dan - phi_a.d(G.tdir)) * daf
             + (K * phi_a.d(G.zdir)) * (w * daf))

    dau_n = dal(u[d - 1]) * 1.0
    for hi, hd in enumerate(G.hdirs):
        dau_n = dau_n + dal(u[hi]) * nvec[hi]
    c_exp = bracket2(dal, Ud, fz) + bracket2(dal, K, w) * fz \
        + K * fz * dau_n
    for hi, hd in enumerate(G.hdirs):
        c_exp = c_exp + bracket1(dal, u[hi], f.d(hd))
        c_exp = c_exp - K * fz * bracket2(dal, u[hi], G.phi.d(hd))
    if n >= 2:
        first = next(j for j, aj in enumerate(alpha) if aj > 0)
        rest = list(alpha)
        rest[first] -= 1
        dal_rest = lambda h: h.dmulti(tuple(rest) + (0,))
        unit = [0] * G.ndir
        unit[first] = 1
        dJ = G.J.dmulti(tuple(unit))
        c_exp = c_exp - w * fz * bracket1(dal_rest, K * K, dJ)

    scale = max(abs(dal(transport(f)).value), 1.0)
    return abs((c_def - c_exp).value), scale
