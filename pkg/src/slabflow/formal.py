"""Pointwise jet algebra for dimension-independent identity checks.

The quadratic interaction terms, the commutators of tangential derivatives
with the flattened operators, and the temporal interaction sums are all
pointwise algebraic identities in the derivative jet of the unknowns: no
relation between values at different points is used.  A `JetField` stores
the derivative values of a scalar field at a single point up to a total
order cap, with the Leibniz rule for products and exact reciprocals.
Filling the independent jets (flattening phi, velocity components,
pressure, time layers) with random numbers and evaluating both sides of a
claimed identity then provides a check that is independent of any grid,
and works in any spatial dimension at trivial cost.

Directions are ordered (t, x_1, ..., x_{d-1}, z); tangential derivatives
are all but the last.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def _indices(ndir: int, cap: int):
    for total in range(cap + 1):
        for idx in itertools.combinations_with_replacement(range(ndir), total):
            counts = [0] * ndir
            for i in idx:
                counts[i] += 1
            yield tuple(counts)


class JetField:
    """Truncated derivative jet of a scalar field at a point."""

    __slots__ = ("ndir", "cap", "data")

    def __init__(self, ndir: int, cap: int, data: dict | None = None):
        self.ndir = ndir
        self.cap = cap
        self.data = data if data is not None else {}

    @classmethod
    def random(cls, rng: np.random.Generator, ndir: int, cap: int,
               scale: float = 1.0, base: float = 0.0) -> "JetField":
        f = cls(ndir, cap)
        for idx in _indices(ndir, cap):
            f.data[idx] = scale * rng.standard_normal()
        f.data[(0,) * ndir] += base
        return f

    @classmethod
    def constant(cls, value: float, ndir: int, cap: int) -> "JetField":
        f = cls(ndir, cap)
        for idx in _indices(ndir, cap):
            f.data[idx] = 0.0
        f.data[(0,) * ndir] = float(value)
        return f

    @property
    def value(self) -> float:
        return self.data[(0,) * self.ndir]

    def d(self, direction: int, order: int = 1) -> "JetField":
        """Derivative jet; the cap drops by `order`."""
        if self.cap < order:
            raise ValueError("jet cap exhausted")
        out = JetField(self.ndir, self.cap - order)
        for idx in _indices(self.ndir, self.cap - order):
            src = list(idx)
            src[direction] += order
            out.data[idx] = self.data[tuple(src)]
        return out

    def dmulti(self, alpha: tuple[int, ...]) -> "JetField":
        out = self
        for direction, order in enumerate(alpha):
            if order:
                out = out.d(direction, order)
        return out

    def __add__(self, other):
        other = _coerce(other, self)
        cap = min(self.cap, other.cap)
        out = JetField(self.ndir, cap)
        for idx in _indices(self.ndir, cap):
            out.data[idx] = self.data[idx] + other.data[idx]
        return out

    __radd__ = __add__

    def __neg__(self):
        out = JetField(self.ndir, self.cap)
        for idx in _indices(self.ndir, self.cap):
            out.data[idx] = -self.data[idx]
        return out

    def __sub__(self, other):
        return self + (-_coerce(other, self))

    def __rsub__(self, other):
        return _coerce(other, self) + (-self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            out = JetField(self.ndir, self.cap)
            for idx in _indices(self.ndir, self.cap):
                out.data[idx] = other * self.data[idx]
            return out
        cap = min(self.cap, other.cap)
        out = JetField(self.ndir, cap)
        for idx in _indices(self.ndir, cap):
            total = 0.0
            for beta in itertools.product(*(range(a + 1) for a in idx)):
                coef = 1.0
                for a, bcomp in zip(idx, beta):
                    coef *= math.comb(a, bcomp)
                rem = tuple(a - bcomp for a, bcomp in zip(idx, beta))
                total += coef * self.data[beta] * other.data[rem]
            out.data[idx] = total
        return out

    __rmul__ = __mul__

    def reciprocal(self) -> "JetField":
        """1/f as a truncated jet (requires nonzero value)."""
        a0 = self.value
        h = (self * (-1.0 / a0)) + 1.0  # h has zero value part
        out = JetField.constant(1.0, self.ndir, self.cap)
        power = JetField.constant(1.0, self.ndir, self.cap)
        for _ in range(self.cap):
            power = power * h
            out = out + power
        return out * (1.0 / a0)


def _coerce(x, like: JetField) -> JetField:
    if isinstance(x, JetField):
        return x
    return JetField.constant(float(x), like.ndir, like.cap)


# ---- geometric jets ---------------------------------------------------------


class FormalGeometry:
    """Jets of the flattening quantities in dimension d.

    Directions are (t, x_1, ..., x_{d-1}, z).  phi is an independent random
    jet (small scale keeps 1 + d_z phi away from zero); K = 1/(1 + d_z phi),
    A is the flattening matrix, and the non-unit normal is extended into the
    bulk as (-D phi, 1).
    """

    def __init__(self, rng: np.random.Generator, d: int, cap: int,
                 scale: float = 0.3):
        self.d = d
        self.ndir = d + 1
        self.cap = cap
        self.phi = JetField.random(rng, self.ndir, cap, scale=scale)
        self.zdir = d  # last direction
        self.J = self.phi.d(self.zdir) + 1.0
        self.K = self.J.reciprocal()

    @property
    def tdir(self) -> int:
        return 0

    @property
    def hdirs(self):
        """Direction indices of the horizontal coordinates."""
        return list(range(1, self.d))

    def sdir(self, l: int) -> int:
        """Direction index of the l-th spatial coordinate (0-based, z last)."""
        return 1 + l if l < self.d - 1 else self.zdir

    def A_row(self, i: int):
        """Row i (0-based) of A as a list of jets of length d."""
        row = [JetField.constant(1.0 if j == i else 0.0, self.ndir, self.cap - 1)
               for j in range(self.d)]
        if i < self.d - 1:
            row[self.d - 1] = -(self.phi.d(1 + i) * self.K)
        else:
            row[self.d - 1] = self.K
        return row

    def grad_A(self, f: JetField):
        """List of jets (nabla_A f)_i = A_il d_l f."""
        out = []
        for i in range(self.d):
            row = self.A_row(i)
            acc = row[0] * f.d(1)
            for l in range(1, self.d):
                direction = 1 + l if l < self.d - 1 else self.zdir
                acc = acc + row[l] * f.d(direction)
            out.append(acc)
        return out

    def spatial_dirs(self):
        """Direction indices of (x_1, ..., x_{d-1}, z)."""
        return list(range(1, self.d)) + [self.zdir]

    def div_A(self, u: list[JetField]) -> JetField:
        g = None
        for j in range(self.d):
            term = self.grad_A(u[j])[j]
            g = term if g is None else g + term
        return g

    def lap_A(self, f: JetField) -> JetField:
        g = self.grad_A(f)
        out = None
        for j in range(self.d):
            term = self.grad_A(g[j])[j]
            out = term if out is None else out + term
        return out

    def normal(self):
        """Extended non-unit normal (-d_1 phi, ..., -d_{d-1} phi, 1)."""
        n = [-(self.phi.d(1 + h)) for h in range(self.d - 1)]
        n.append(JetField.constant(1.0, self.ndir, self.cap - 1))
        return n

    def flat_grad(self, f: JetField):
        return [f.d(dd) for dd in self.spatial_dirs()]

    def flat_lap(self, f: JetField) -> JetField:
        out = None
        for dd in self.spatial_dirs():
            term = f.d(dd, 2)
            out = term if out is None else out + term
        return out


def bracket2(dalpha, g: JetField, h: JetField) -> JetField:
    """Symmetric double commutator [d^a, g, h] = d^a(gh) - d^a(g) h - g d^a(h)."""
    return dalpha(g * h) - dalpha(g) * h - g * dalpha(h)


def bracket1(dalpha, g: JetField, h: JetField) -> JetField:
    """[d^a, g] h = d^a(gh) - g d^a(h)."""
    return dalpha(g * h) - g * dalpha(h)
