"""slabflow: spectral tools for viscous free-surface flow on a periodic slab.

The flow domain (0, L) x (-b + eta-graph) is flattened onto the fixed slab
(0, L) x (-b, 0) by a harmonic-extension diffeomorphism.  The package
provides the flattened differential operators, the quadratic interaction
terms of the perturbed-linear formulation, per-mode viscous surface-wave
solvers, a small-amplitude nonlinear time stepper, and the decay
diagnostics used to study the large-time behaviour of small solutions.
"""

from .grid import SpectralGrid, DegenerateMapping
from .geometry import GeometryState, build_geometry, poisson_extend, dt_geometry

__all__ = [
    "SpectralGrid",
    "DegenerateMapping",
    "GeometryState",
    "build_geometry",
    "poisson_extend",
    "dt_geometry",
]

__version__ = "0.1.0"
