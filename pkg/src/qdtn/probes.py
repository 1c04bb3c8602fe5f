"""Frozen-coefficient parametrix and singular boundary probes.

For ``M(y) = sigma(y) A(y)`` and ``q = M(y)^{-1}(x - y).(x - y)``

    H(x, y) = q^{(2-n)/2} / ((n - 2) |S^{n-1}| sqrt(det M(y)))     n >= 3
    H(x, y) = -ln(q) / (4 pi sqrt(det M(y)))                        n = 2

The probe trace is ``f_delta = eta * H(., y_delta)`` on the boundary, with a
radial cutoff ``eta`` equal to 1 near the anchor and vanishing outside GAMMA0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import fem, weak
from .errors import GateError
from .mesh import probe_point, quintic_blend

RESOLUTION_FACTOR = 4


def sphere_area(n):
    """``|S^{n-1}|``."""
    return 2.0 * math.pi ** (n / 2) / math.gamma(n / 2)


@dataclass(frozen=True, eq=False)
class Parametrix:
    """``A`` is a conductivity field; ``sigma`` a positive scalar or callable on points."""

    A: fem.ConductivityMatrixField
    sigma: object = 1.0
    dimension: int | None = None

    @property
    def n(self):
        return self.A.dimension if self.dimension is None else self.dimension

    def sigma_at(self, y):
        if callable(self.sigma):
            return float(np.asarray(self.sigma(np.atleast_2d(y))).ravel()[0])
        return float(self.sigma)

    def frozen_matrix(self, y):
        y = np.asarray(y, dtype=float)
        return self.sigma_at(y) * self.A(y[None, :])[0]

    def with_sigma(self, sigma):
        return Parametrix(self.A, sigma, self.dimension)


def _frozen(p, x, y):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float)
    M = p.frozen_matrix(y)
    Minv = np.linalg.inv(M)
    r = x - y
    Mr = r @ Minv.T
    q = np.einsum("md,md->m", Mr, r)
    if np.any(q <= 0):
        raise ValueError("parametrix evaluated at its pole x = y")
    return M, Mr, q


def parametrix_value(p, x, y):
    """``H(x, y)`` for points ``x`` of shape ``(m, n)`` or ``(n,)``."""
    scalar = np.ndim(x) == 1
    M, _, q = _frozen(p, x, y)
    n = p.n
    det = math.sqrt(np.linalg.det(M))
    if n == 2:
        val = -np.log(q) / (4.0 * math.pi * det)
    else:
        val = q ** ((2 - n) / 2) / ((n - 2) * sphere_area(n) * det)
    return float(val[0]) if scalar else val


def parametrix_gradient(p, x, y):
    """Gradient of ``H(., y)`` in ``x``."""
    scalar = np.ndim(x) == 1
    M, Mr, q = _frozen(p, x, y)
    n = p.n
    det = math.sqrt(np.linalg.det(M))
    if n == 2:
        g = -2.0 * Mr / q[:, None] / (4.0 * math.pi * det)
    else:
        c = 1.0 / ((n - 2) * sphere_area(n) * det)
        g = c * (2 - n) * (q ** (-n / 2))[:, None] * Mr
    return g[0] if scalar else g


def ell_n(n, delta):
    """Remainder scale: 1 for n = 3, ``|ln delta|^{1/2}`` for n = 4, ``delta^{2 - n/2}`` for n >= 5."""
    if n < 3:
        raise ValueError(f"ell_n is defined for n >= 3, got n={n}")
    if not 0 < delta < 1:
        raise ValueError(f"ell_n needs 0 < delta < 1, got {delta}")
    if n == 3:
        return 1.0
    if n == 4:
        return math.sqrt(abs(math.log(delta)))
    return delta ** (2 - n / 2)


@dataclass(frozen=True, eq=False)
class ProbeData:
    trace_f_delta: fem.BoundaryTrace
    delta: float
    y_delta: np.ndarray
    parametrix_values_on_gamma: np.ndarray
    eta_cutoff: np.ndarray
    parametrix: Parametrix = None
    meta: dict = field(default_factory=dict)


def probe_cutoff(mesh, spec, inner_radius=None):
    """Radial quintic cutoff: 1 on ``B(x0, inner_radius)``, 0 beyond ``r0``.

    ``inner_radius`` defaults to ``r0 / 2`` and may not go below ``r0 / 4``.
    """
    r0 = spec.ball_radius_r0
    r_in = 0.5 * r0 if inner_radius is None else float(inner_radius)
    if not r0 / 4 <= r_in < r0:
        raise ValueError(f"inner radius must lie in [r0/4, r0), got {r_in}")
    rho = np.linalg.norm(mesh.vertices[mesh.boundary_vertices] - spec.anchor_x0, axis=1)
    eta = quintic_blend((rho - r_in) / (r0 - r_in))
    outside = np.ones(len(eta), dtype=bool)
    outside[mesh.gamma0_dofs] = False
    if np.any(eta[outside] != 0):
        raise GateError("probe-support-gamma0", "probe cutoff reaches outside GAMMA0")
    return eta


def check_resolution(mesh, delta):
    if delta < RESOLUTION_FACTOR * mesh.spacing * (1 - 1e-12):
        raise GateError("probe-resolution",
                        f"delta={delta:.4g} violates delta >= {RESOLUTION_FACTOR}h "
                        f"(h={mesh.spacing:.4g}); refine the mesh or enlarge delta")


def build_probe(p, spec, mesh, delta, inner_radius=None):
    """Singular probe ``f_delta = eta H(., y_delta)`` supported in GAMMA0."""
    check_resolution(mesh, delta)
    y = probe_point(spec, delta)
    eta = probe_cutoff(mesh, spec, inner_radius)
    H = parametrix_value(p, mesh.vertices[mesh.boundary_vertices], y)
    f = fem.BoundaryTrace(eta * H, "GAMMA0").check_support(mesh)
    return ProbeData(f, float(delta), y, H, eta, p)


def normalization_integral(p1, p2, mesh, y, points_per_direction=4):
    """``K = int A grad H1(., y) . grad H2(., y)`` over the domain, ``A`` from ``p1``."""
    pts, w, _ = fem.quadrature_points(mesh, points_per_direction)
    flat = pts.reshape(-1, mesh.dimension)
    g1 = parametrix_gradient(p1, flat, y)
    g2 = parametrix_gradient(p2, flat, y)
    Ag2 = np.einsum("mij,mj->mi", p1.A(flat), g2)
    return float(np.sum(w.ravel() * np.einsum("mi,mi->m", g1, Ag2)))


@dataclass(frozen=True)
class RemainderReport:
    delta: float
    z_h1: float
    w_h1: float
    ell_n: float
    ratio: float
    side: str
    full_boundary: bool


def remainder_diagnostic(mesh, probe, problem=None, full_boundary=False, mu_omega=None):
    """``||w_delta - I_h H(., y_delta)||_{H1}`` for the drift problem with probe data.

    ``problem`` defaults to ``div(sigma A grad w) = 0`` from the probe's
    parametrix. ``full_boundary`` replaces the cutoff data by the raw trace
    of ``H`` on the whole boundary.
    """
    p = probe.parametrix
    if problem is None:
        sigma = p.sigma(mesh.barycenters) if callable(p.sigma) else p.sigma
        problem = weak.DriftProblem(p.A, weight=sigma)
    data = probe.parametrix_values_on_gamma if full_boundary else probe.trace_f_delta
    if problem.side is weak.Side.ADJOINT_FORM:
        w = weak.solve_adjoint_drift_bvp(mesh, problem, data, mu_omega, record_energy=False)
    else:
        w = weak.solve_drift_divergence_bvp(mesh, problem, data, mu_omega, record_energy=False)
    H = parametrix_value(p, mesh.vertices, probe.y_delta)
    z = fem.h1_norm(mesh, w.nodal_values - H)
    ell = ell_n(mesh.dimension, probe.delta) if mesh.dimension >= 3 else float("nan")
    return RemainderReport(probe.delta, z, w.h1_norm(), ell, z / ell, problem.side.value, bool(full_boundary))
