"""Nonlinear time integration of the free-surface slab in flattened
coordinates.

The splitting follows the perturbed-linear form of the system: per
horizontal Fourier mode the flat Stokes-plus-gravity pencil advances
implicitly through the factored theta-rule steppers of the stokes module,
while every geometric interaction term enters as explicit data.  A step
consists of a predictor pass with the interaction terms of the current
state and one corrector pass with the terms re-evaluated on the predicted
state; under trapezoidal weights ("cn") the corrector makes the splitting
second order, under implicit Euler ("ie") it mainly tightens the
constraint rows.

Divergence, no-slip, and stress rows are enforced at the new time level by
the implicit solve, so accepted states satisfy

    div u = G^2,   u(-b) = 0,   flat stress rows = gravity + G^3

at collocation accuracy every step.  The surface spectrum of all forcing
data is truncated to the dealias band, keeping evolved states band-limited.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from . import forms, geometry as geo
from .grid import (DegenerateMapping, SpectralGrid, gaussian_lowpass_surface,
                   random_surface)
from .stokes import (SolverFailure, _SCHEMES, _antiderivative, _cheb_diff,
                     mode_operator, mode_stepper, solve_stokes_stress)


class Diverged(RuntimeError):
    """The time stepper produced non-finite values."""


# ---------------------------------------------------------------------------
# state container


@dataclass(frozen=True, eq=False)
class FlowState:
    """Velocity, pressure and surface elevation on the fixed slab.

    `layers` is an optional cache of PDE-derived time-derivative fields
    attached by the diagnostics; it never participates in stepping or
    checkpointing.
    """

    grid: SpectralGrid
    u1: np.ndarray
    u2: np.ndarray
    p: np.ndarray
    eta: np.ndarray
    t: float = 0.0
    layers: dict | None = None

    @cached_property
    def geometry(self) -> geo.GeometryState:
        return geo.build_geometry(self.grid, self.eta)

    def energy(self) -> float:
        """Discrete energy (1/2) int J |u|^2 + (1/2) int eta^2."""
        g = self.geometry
        bulk = self.grid.integrate_bulk(g.J * (self.u1 ** 2 + self.u2 ** 2))
        surf = self.grid.integrate_surface(self.eta ** 2)
        return 0.5 * bulk + 0.5 * surf

    def u_sobolev_sq(self, r: int = 1) -> float:
        return (self.grid.bulk_norm_sq(self.u1, r)
                + self.grid.bulk_norm_sq(self.u2, r))

    def divergence_residual(self) -> float:
        """L^2 norm of div_A u, the exact incompressibility defect."""
        d = geo.div_A(self.geometry, self.u1, self.u2)
        return float(np.sqrt(self.grid.bulk_l2_sq(d)))

    def invariant_report(self) -> dict:
        u_scale = max(np.sqrt(self.u_sobolev_sq(1)), 1e-300)
        return {
            "finite": bool(all(np.all(np.isfinite(f)) for f in
                               (self.u1, self.u2, self.p, self.eta))),
            "min_J": self.geometry.min_J,
            "div_rel": self.divergence_residual() / u_scale,
            "bottom_sup": float(max(np.abs(self.u1[:, -1]).max(),
                                    np.abs(self.u2[:, -1]).max())),
        }


def quiescent_pressure(grid: SpectralGrid, eta: np.ndarray,
                       sweeps: int = 6) -> np.ndarray:
    """Instantaneous pressure of the fluid at rest under a surface eta.

    With u = 0 the acceleration is -grad_A p, so keeping the velocity
    solenoidal and the bottom impermeable requires lap_A p = 0 with p = eta
    on the surface and d_z p = 0 at the bottom.  The flattened Laplacian is
    inverted by perturbative sweeps around the flat one, which contract
    geometrically in the surface amplitude.  Starting a march from this
    pressure keeps the first steps and the t = 0 diagnostics free of a
    spurious pressure transient.
    """
    eta = np.asarray(eta, dtype=float)
    if not np.any(eta):
        return np.zeros((grid.n_x, grid.n_z))
    g = geo.build_geometry(grid, eta)
    etah = grid.to_hat(eta)
    m = grid.n_z
    d1 = (2.0 / grid.b) * _cheb_diff(m)[1]
    d2 = d1 @ d1
    lus = []
    for k in grid.k:
        a = d2 - (k * k) * np.eye(m)
        a[0] = 0.0
        a[0, 0] = 1.0
        a[-1] = d1[-1]
        lus.append(lu_factor(a))
    p = np.repeat(eta[:, None], m, axis=1)
    for _ in range(sweeps):
        defect = (grid.dx(p, 2) + grid.dz(p, 2)) - geo.lap_A(g, p)
        rh = grid.to_hat(defect)
        rh[:, 0] = etah
        rh[:, -1] = 0.0
        ph = np.stack([lu_solve(lus[j], rh[j]) for j in range(grid.n_k)])
        p = grid.from_hat(ph)
    return p


def initial_state(grid: SpectralGrid, amplitude: float = 1e-3, seed: int = 0,
                  profile: str = "lowpass", k0: float = 0.5,
                  n_modes: int = 3) -> FlowState:
    """Quiescent start over a smooth surface.

    u = 0 is solenoidal and satisfies no-slip, and the accompanying
    pressure is the instantaneous rest pressure, so the zeroth-order
    compatibility conditions hold; higher orders are not attempted.
    """
    rng = np.random.default_rng(seed)
    if profile == "lowpass":
        eta = gaussian_lowpass_surface(grid, rng, amplitude, k0=k0)
    elif profile == "modes":
        eta = random_surface(grid, rng, amplitude=amplitude, n_modes=n_modes)
    elif profile == "cosine":
        eta = amplitude * np.cos(2.0 * np.pi * n_modes * grid.x / grid.L)
    else:
        raise ValueError(f"unknown initial profile {profile!r}")
    eta = grid.dealias(eta)
    zeros = np.zeros((grid.n_x, grid.n_z))
    state = FlowState(grid=grid, u1=zeros, u2=zeros.copy(),
                      p=quiescent_pressure(grid, eta), eta=eta)
    state.geometry  # fail fast on a degenerate surface
    return state


# ---------------------------------------------------------------------------
# checkpoints


CHECKPOINT_FORMAT = "slabflow/checkpoint/1"


def write_checkpoint(state: FlowState, path) -> None:
    """Self-describing binary snapshot; arrays round-trip bit-exactly."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "grid": {"L": state.grid.L, "n_x": state.grid.n_x,
                 "n_z": state.grid.n_z, "b": state.grid.b,
                 "dealias_fraction": state.grid.dealias_fraction},
    }
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)),
                 u1=state.u1, u2=state.u2, p=state.p, eta=state.eta,
                 t=np.float64(state.t))


def read_checkpoint(path) -> FlowState:
    with np.load(path) as data:
        header = json.loads(str(data["header"][()]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not a checkpoint of format {CHECKPOINT_FORMAT}")
        grid = SpectralGrid(**header["grid"])
        return FlowState(grid=grid, u1=data["u1"], u2=data["u2"],
                         p=data["p"], eta=data["eta"], t=float(data["t"][()]))


# ---------------------------------------------------------------------------
# interaction data and the per-mode implicit advance


def _state_hats(state: FlowState):
    gr = state.grid
    return (gr.to_hat(state.u1), gr.to_hat(state.u2),
            gr.to_hat(state.p), gr.to_hat(state.eta))


def surface_rate(state: FlowState) -> np.ndarray:
    """Kinematic rate d_t eta = u . N evaluated on the current state."""
    return (state.u2[:, 0]
            - state.geometry.Deta * state.u1[:, 0])


def _interaction_hats(state: FlowState) -> dict:
    """Fourier data of the geometric terms, truncated to the dealias band."""
    gr = state.grid
    g = state.geometry
    terms = forms.assemble_G(g, state.u1, state.u2, state.p,
                             eta_t=surface_rate(state))
    mask = gr.dealias_mask
    col = mask[:, None]
    return {
        "g1h": gr.to_hat(terms["G1"][0]) * col,
        "g1d": gr.to_hat(terms["G1"][1]) * col,
        "g2": gr.to_hat(terms["G2"]) * col,
        "g3h": gr.to_hat(terms["G3"][0]) * mask,
        "g3d": gr.to_hat(terms["G3"][1]) * mask,
        "g4": gr.to_hat(terms["G4"]) * mask,
    }


class _ModeBank:
    """Factored theta-rule steppers for every rfft mode of one grid."""

    def __init__(self, grid: SpectralGrid, dt: float, scheme: str):
        if not (np.isfinite(dt) and dt > 0):
            raise ValueError("dt must be positive")
        if scheme not in _SCHEMES:
            raise ValueError(f"unknown scheme {scheme!r}")
        self.grid = grid
        self.dt = float(dt)
        self.scheme = scheme
        self.theta = _SCHEMES[scheme]
        self.fac = (1.0 - self.theta) / self.theta
        self.steppers = [mode_stepper(mode_operator(k, n_z=grid.n_z, b=grid.b),
                                      dt, scheme)
                         for k in grid.k]

    def advance(self, state: FlowState, xh, g_old: dict,
                g_star: dict) -> FlowState:
        """One theta-rule pass from `state` with explicit interaction data.

        `g_star` is the new-time estimate of the interaction terms (equal to
        `g_old` on the predictor pass); constraint rows always use it, while
        dynamic rows use the theta-weighted combination.
        """
        gr = self.grid
        m = gr.n_z
        dt, th, om, fac = self.dt, self.theta, 1.0 - self.theta, self.fac
        u1h, u2h, ph, etah = xh
        u1n = np.zeros_like(u1h)
        u2n = np.zeros_like(u2h)
        pn = np.zeros_like(ph)
        etan = np.zeros_like(etah)
        inner = slice(1, m - 1)
        for j, st in enumerate(self.steppers):
            g1 = th * g_star["g1h"][j] + om * g_old["g1h"][j]
            g1d = th * g_star["g1d"][j] + om * g_old["g1d"][j]
            g4 = th * g_star["g4"][j] + om * g_old["g4"][j]
            if st.op.k == 0.0:
                r = np.zeros(m, dtype=complex)
                r[inner] = dt * g1[inner]
                r[0] = g_star["g3h"][j]
                y = lu_solve(st.a_lu, st.b_mat @ u1h[j] + r,
                             check_finite=False)
                u1n[j] = y
                u2n[j] = _antiderivative(g_star["g2"][j], gr.b)
                rate_new = u2n[j][0] + g_star["g4"][j]
                rate_old = u2h[j][0] + g_old["g4"][j]
                etan[j] = etah[j] + dt * (th * rate_new + om * rate_old)
                # the axis pressure is slaved to the vertical momentum row
                pz = (st.op.d2 @ u2n[j] - (u2n[j] - u2h[j]) / dt + g1d)
                prim = _antiderivative(pz, gr.b)
                p_top = (etan[j] + 2.0 * (st.op.d1 @ u2n[j])[0]
                         + g_star["g3d"][j])
                pn[j] = p_top - (prim[0] - prim)
                continue
            x = np.concatenate([u1h[j], u2h[j],
                                np.zeros(m, dtype=complex), [etah[j]]])
            r = np.zeros(3 * m + 1, dtype=complex)
            r[inner] = dt * g1[inner]
            r[m + 1:2 * m - 1] = dt * g1d[1:m - 1]
            r[0] = g_star["g3h"][j]
            r[m] = -(g_star["g3d"][j] + fac * g_old["g3d"][j])
            r[2 * m:3 * m] = -g_star["g2"][j]
            r[3 * m] = dt * g4
            y = lu_solve(st.a_lu, st.b_mat @ x + r, check_finite=False)
            u1n[j] = y[:m]
            u2n[j] = y[m:2 * m]
            # The solve pins the theta-weighted multiplier, and that is what
            # the state keeps.  Unfolding the endpoint value through
            # p_new = theta_weighted - fac * p_old looks more accurate but
            # runs an undamped recursion on the near-null top collocation
            # mode of the pressure, which saturates at a few percent of the
            # pressure scale and never decays; the weighted multiplier is
            # smooth and off only by the theta stamp inside one step.
            pn[j] = th * y[2 * m:3 * m]
            etan[j] = y[3 * m]
        fields = [gr.from_hat(f) for f in (u1n, u2n, pn)]
        eta_new = gr.from_hat(etan)
        if not all(np.all(np.isfinite(f)) for f in fields + [eta_new]):
            raise Diverged(f"non-finite state at t = {state.t + self.dt:g}")
        return FlowState(grid=gr, u1=fields[0], u2=fields[1], p=fields[2],
                         eta=eta_new, t=state.t + self.dt)


_BANK_CACHE: dict = {}


def _bank(grid: SpectralGrid, dt: float, scheme: str) -> _ModeBank:
    key = (grid.L, grid.n_x, grid.n_z, grid.b, grid.dealias_fraction,
           float(dt), scheme)
    bank = _BANK_CACHE.get(key)
    if bank is None:
        bank = _ModeBank(grid, dt, scheme)
        if len(_BANK_CACHE) > 4:
            _BANK_CACHE.clear()
        _BANK_CACHE[key] = bank
    return bank


def step_imex(state: FlowState, dt: float, scheme: str = "cn",
              correctors: int = 2) -> FlowState:
    """Advance one step: implicit flat pencil, explicit interaction terms,
    corrector passes re-evaluating the terms on the newest iterate.

    Each pass contracts the mismatch between the constraint rows and the
    interaction data by roughly the surface steepness, so two passes put
    the relative divergence defect near rounding for gentle slopes while a
    third buys little.
    """
    bank = _bank(state.grid, dt, scheme)
    xh = _state_hats(state)
    g_old = _interaction_hats(state)
    new = bank.advance(state, xh, g_old, g_old)
    for _ in range(correctors):
        g_star = _interaction_hats(new)
        new = bank.advance(state, xh, g_old, g_star)
    return new


# ---------------------------------------------------------------------------
# energy identity


def energy_identity_residual(state: FlowState) -> float:
    """Instantaneous defect of the exact dissipation law.

    The time derivatives of u, eta, and J are substituted from the PDE
    right-hand sides (no time differencing), so for a state satisfying the
    divergence, no-slip and stress constraints the quantity

        d/dt [ (1/2) int J |u|^2 + (1/2) int eta^2 ] + (1/2) int J |D_A u|^2

    vanishes, and the returned absolute value measures only the discrete
    closure of the integration by parts.
    """
    gr, g = state.grid, state.geometry
    u1, u2, p = state.u1, state.u2, state.p
    eta_t = surface_rate(state)
    terms = forms.assemble_G(g, u1, u2, p, eta_t=eta_t)
    u1_t = gr.dx(u1, 2) + gr.dz(u1, 2) - gr.dx(p) + terms["G1"][0]
    u2_t = gr.dx(u2, 2) + gr.dz(u2, 2) - gr.dz(p) + terms["G1"][1]
    dt_J = geo.dt_geometry(g, eta_t).dt_J
    d11, d12, d22 = geo.dsym_A(g, u1, u2)
    d_energy = (gr.integrate_bulk(g.J * (u1 * u1_t + u2 * u2_t)
                                  + 0.5 * dt_J * (u1 ** 2 + u2 ** 2))
                + gr.integrate_surface(state.eta * eta_t))
    dissipation = 0.5 * gr.integrate_bulk(
        g.J * (d11 ** 2 + 2.0 * d12 ** 2 + d22 ** 2))
    return abs(d_energy + dissipation)


def constraint_consistent_state(grid: SpectralGrid, eta: np.ndarray,
                                forcing, sweeps: int = 5) -> FlowState:
    """Manufacture a state satisfying the full nonlinear constraint set.

    Fixed-point sweeps of the per-mode stress solves with the state's own
    interaction data converge geometrically in the surface amplitude, so a
    handful of sweeps pins div_A u = 0, no-slip, and the geometric stress
    balance to round-off.  `forcing` is a pair of bulk fields filling the
    momentum rows; it controls the velocity scale and is otherwise free.
    """
    f1, f2 = forcing
    mask = grid.dealias_mask
    f1h = grid.to_hat(f1) * mask[:, None]
    f2h = grid.to_hat(f2) * mask[:, None]
    etah = grid.to_hat(eta)
    ops = [mode_operator(k, n_z=grid.n_z, b=grid.b) for k in grid.k]
    u1 = np.zeros((grid.n_x, grid.n_z))
    u2 = np.zeros_like(u1)
    p = np.repeat(eta[:, None], grid.n_z, axis=1)
    g = geo.build_geometry(grid, eta)
    for _ in range(sweeps):
        terms = forms.assemble_G(g, u1, u2, p)
        hh = grid.to_hat(terms["G2"]) * mask[:, None]
        psih = grid.to_hat(terms["G3"][0]) * mask
        psid = etah + grid.to_hat(terms["G3"][1]) * mask
        u1h = np.zeros_like(f1h)
        u2h = np.zeros_like(f1h)
        ph = np.zeros_like(f1h)
        for j, op in enumerate(ops):
            u_hat, p_hat = solve_stokes_stress(
                np.stack([f1h[j], f2h[j]]), hh[j],
                np.array([psih[j], psid[j]]), op=op)
            u1h[j], u2h[j], ph[j] = u_hat[0], u_hat[1], p_hat
        u1, u2, p = (grid.from_hat(u1h), grid.from_hat(u2h),
                     grid.from_hat(ph))
    return FlowState(grid=grid, u1=u1, u2=u2, p=p, eta=np.asarray(eta, float))


# ---------------------------------------------------------------------------
# trajectories


@dataclass(eq=False)
class Trajectory:
    """Diagnostic series at fixed cadence plus stored state snapshots."""

    times: list = field(default_factory=list)
    series: dict = field(default_factory=dict)
    snapshot_times: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    failed: str | None = None

    def record(self, t: float, row: dict) -> None:
        if self.times and t <= self.times[-1]:
            raise ValueError("diagnostic times must be strictly increasing")
        self.times.append(float(t))
        for name, value in row.items():
            self.series.setdefault(name, []).append(float(value))

    def add_snapshot(self, state: FlowState) -> None:
        if self.snapshot_times and state.t <= self.snapshot_times[-1]:
            raise ValueError("snapshot times must be strictly increasing")
        self.snapshot_times.append(float(state.t))
        self.snapshots.append(state)

    def column(self, name: str) -> np.ndarray:
        return np.asarray(self.series[name])

    @property
    def t(self) -> np.ndarray:
        return np.asarray(self.times)


def _diagnostic_row(state: FlowState) -> dict:
    rep = state.invariant_report()
    return {
        "energy": state.energy(),
        "min_J": rep["min_J"],
        "div_rel": rep["div_rel"],
        "eta_sup": float(np.abs(state.eta).max()),
        "u_sup": float(max(np.abs(state.u1).max(), np.abs(state.u2).max())),
    }


# ---------------------------------------------------------------------------
# configured runs


@dataclass(frozen=True)
class RunConfig:
    """Flat description of one simulation; every field is a plain scalar."""

    L: float = 400.0
    n_x: int = 256
    n_z: int = 33
    depth: float = 1.0
    amplitude: float = 1e-3
    profile: str = "lowpass"
    k0: float = 0.5
    n_modes: int = 3
    seed: int = 0
    dt: float = 0.01
    t_end: float = 50.0
    scheme: str = "cn"
    sample_every: int = 10
    snapshot_every: int = 50
    keep_snapshots: bool = True
    refine_every: int = 100
    refine_tol: float = 1e-6
    max_refinements: int = 3
    report_path: str | None = None
    checkpoint_path: str | None = None
    checkpoint_every: int = 0

    def validate(self) -> None:
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise ValueError("dt must be positive")
        if not (np.isfinite(self.t_end) and self.t_end >= 0):
            raise ValueError("t_end must be nonnegative")
        if self.scheme not in _SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.profile not in ("lowpass", "modes", "cosine"):
            raise ValueError(f"unknown initial profile {self.profile!r}")
        if self.sample_every < 1 or self.snapshot_every < 1:
            raise ValueError("cadences must be at least one step")
        if self.amplitude < 0:
            raise ValueError("amplitude must be nonnegative")


def _step_doubling_gap(state: FlowState, dt: float, scheme: str) -> float:
    one = step_imex(state, dt, scheme)
    half = step_imex(step_imex(state, 0.5 * dt, scheme), 0.5 * dt, scheme)
    return max(float(np.abs(one.u1 - half.u1).max()),
               float(np.abs(one.u2 - half.u2).max()),
               float(np.abs(one.eta - half.eta).max()))


def run(config: RunConfig) -> Trajectory:
    """Integrate the configured problem, sampling diagnostics on the way.

    On Diverged or DegenerateMapping the partial trajectory is returned
    with `failed` set (and the report written if a path is configured)
    instead of propagating the exception.
    """
    config.validate()
    grid = SpectralGrid(L=config.L, n_x=config.n_x, n_z=config.n_z,
                        b=config.depth)
    state = initial_state(grid, amplitude=config.amplitude, seed=config.seed,
                          profile=config.profile, k0=config.k0,
                          n_modes=config.n_modes)
    traj = Trajectory()
    traj.record(0.0, _diagnostic_row(state))
    if config.keep_snapshots:
        traj.add_snapshot(state)
    dt = config.dt
    refinements = 0
    step = 0
    try:
        while state.t < config.t_end - 1e-12:
            if (config.refine_every and step % config.refine_every == 0
                    and refinements < config.max_refinements and step > 0):
                if _step_doubling_gap(state, dt, config.scheme) > config.refine_tol:
                    dt *= 0.5
                    refinements += 1
                    continue
            state = step_imex(state, min(dt, config.t_end - state.t),
                              config.scheme)
            step += 1
            last = state.t >= config.t_end - 1e-12
            if step % config.sample_every == 0 or last:
                traj.record(state.t, _diagnostic_row(state))
            if config.keep_snapshots and (step % config.snapshot_every == 0
                                          or last):
                traj.add_snapshot(state)
            if (config.checkpoint_path and config.checkpoint_every
                    and step % config.checkpoint_every == 0):
                write_checkpoint(state, config.checkpoint_path)
    except (Diverged, DegenerateMapping, SolverFailure) as exc:
        traj.failed = f"{type(exc).__name__}: {exc}"
    if config.report_path:
        _write_report(traj, config, config.report_path)
    return traj


def _write_report(traj: Trajectory, config: RunConfig, path) -> None:
    report = {
        "t_final": traj.times[-1] if traj.times else None,
        "failed": traj.failed,
        "config": {k: getattr(config, k) for k in
                   ("L", "n_x", "n_z", "depth", "amplitude", "profile",
                    "seed", "dt", "t_end", "scheme")},
        "series": {name: vals for name, vals in traj.series.items()},
        "times": traj.times,
    }
    with open(path, "w") as fh:
        json.dump(report, fh, indent=1)
