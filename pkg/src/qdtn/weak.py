"""Drift-form boundary value problems with a Lax-Milgram coercivity gate.

Divergence form:  div(M grad u + u P) = div(F),      u = f on the boundary
Adjoint form:     div(M grad u) - P . grad u = R . grad g,  u = f

with ``M = weight * A`` uniformly elliptic. The weak forms are

    b(u, v)  = int (M grad u + u P) . grad v
    b*(u, v) = int M grad u . grad v + v P . grad u     (= b(v, u))

and a solve only runs when ``sup |P| <= beta / mu_Omega`` where
``2 beta |xi|^2 <= M xi . xi``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import fem
from .errors import GateError


class Side(enum.Enum):
    DIVERGENCE_FORM = "divergence"
    ADJOINT_FORM = "adjoint"


@dataclass(frozen=True, eq=False)
class Transport:
    """Right-hand side ``R . grad g`` of the adjoint problem.

    ``R`` and ``div_R`` are callables on points ``(m, n)``; ``g`` is a
    callable or a nodal vector. ``div_R`` defaults to central differences
    of ``R``.
    """

    R: object
    g: object
    div_R: object = None


@dataclass(frozen=True, eq=False)
class DriftProblem:
    A: fem.ConductivityMatrixField
    weight: object = 1.0
    drift_P: object = None
    side: Side = Side.DIVERGENCE_FORM
    rhs_divF: object = None
    rhs_transport: Transport | None = None

    def weights(self, mesh):
        return fem.cell_values(mesh, self.weight)

    def drift(self, mesh):
        if self.drift_P is None:
            return np.zeros((mesh.n_cells, mesh.dimension))
        return fem.cell_vectors(mesh, self.drift_P)

    def ellipticity(self, mesh):
        """``(beta, beta_tilde)`` sampled at cell barycenters."""
        Ac = self.A(mesh.barycenters)
        c = self.weights(mesh)
        lam_min = np.linalg.eigvalsh(Ac)[:, 0]
        beta = 0.5 * float(np.min(c * lam_min))
        beta_tilde = float(np.max(c[:, None, None] * np.abs(Ac)))
        return beta, beta_tilde

    def drift_sup(self, mesh):
        P = self.drift(mesh)
        return float(np.linalg.norm(P, axis=1).max()) if len(P) else 0.0


@dataclass(frozen=True)
class CoercivityReport:
    passed: bool
    margin: float
    threshold: float
    drift_sup: float
    beta: float
    mu_omega: float

    def __bool__(self):
        return self.passed


def check_coercivity(problem, mesh, mu_omega=None):
    """Coercivity gate: passes iff ``sup|P| <= beta / mu_Omega`` (non-strict)."""
    mu = _mu(mesh, mu_omega)
    beta, _ = problem.ellipticity(mesh)
    threshold = beta / mu
    p_sup = problem.drift_sup(mesh)
    return CoercivityReport(p_sup <= threshold, threshold - p_sup, threshold, p_sup, beta, mu)


@lru_cache(maxsize=16)
def cached_poincare(mesh):
    return fem.poincare_constant(mesh)


def _mu(mesh, mu_omega):
    return cached_poincare(mesh) if mu_omega is None else mu_omega


def _gate(problem, mesh, mu_omega):
    report = check_coercivity(problem, mesh, _mu(mesh, mu_omega))
    if not report:
        raise GateError("lax-milgram-coercivity",
                        f"sup|P| = {report.drift_sup:.4g} exceeds beta/mu_Omega = {report.threshold:.4g}; "
                        "the drift form is not known to be coercive, refusing to solve")
    return report


def drift_system(problem, mesh):
    """Sparse matrix of ``b`` (divergence side) or ``b*`` (adjoint side)."""
    K = fem.assemble_weighted_stiffness(mesh, problem.weights(mesh), problem.A)
    if problem.drift_P is None:
        return K
    P = problem.drift(mesh)
    if problem.side is Side.DIVERGENCE_FORM:
        return (K + fem.assemble_drift_divergence(mesh, P)).tocsr()
    return (K + fem.assemble_transport(mesh, P)).tocsr()


def _vector_l2(mesh, F):
    if F is None:
        return 0.0
    if callable(F):
        pts, w, _ = fem.quadrature_points(mesh)
        vals = np.asarray(F(pts.reshape(-1, mesh.dimension))).reshape(pts.shape)
        return float(np.sqrt(np.sum(w * (vals**2).sum(axis=2))))
    return fem.l2_norm_cells(mesh, fem.cell_vectors(mesh, F))


def _energy_ratio(mesh, u, f_vals, data_norm):
    ctx = fem.build_norm_context(mesh)
    denom = fem.boundary_norm(ctx, f_vals, 0.5) + data_norm
    num = fem.h1_norm(mesh, u)
    return num / denom if denom > 0 else (0.0 if num == 0 else np.inf)


def solve_drift_divergence_bvp(mesh, problem, f, mu_omega=None, record_energy=True):
    """Weak solution of ``div(M grad u + u P) = div(F)``, ``u = f``."""
    if problem.side is not Side.DIVERGENCE_FORM:
        raise ValueError("problem is not in divergence form")
    report = _gate(problem, mesh, mu_omega)
    system = drift_system(problem, mesh)
    load = None if problem.rhs_divF is None else fem.assemble_divergence_load(mesh, problem.rhs_divF)
    f_vals = fem._boundary_vector(mesh, f)
    u = fem.DirichletSolver(mesh, system).solve(f_vals, load)
    info = {"coercivity_margin": report.margin}
    if record_energy:
        info["energy_ratio"] = _energy_ratio(mesh, u, f_vals, _vector_l2(mesh, problem.rhs_divF))
    return fem.FieldSolution(u, mesh, info)


def _nodal_or_callable(mesh, g, pts, bary):
    if callable(g):
        return np.asarray(g(pts.reshape(-1, mesh.dimension))).reshape(pts.shape[:2])
    g = np.asarray(g, dtype=float)
    return np.einsum("qi,ci->cq", bary, g[mesh.cells])


def _central_divergence(R, x, step=1e-6):
    div = np.zeros(len(x))
    for k in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[k] = step
        div += (np.asarray(R(x + e))[:, k] - np.asarray(R(x - e))[:, k]) / (2 * step)
    return div


def assemble_transport_load(mesh, transport):
    """Weak load of ``R . grad g`` moved to ``g``: ``b_i = int g (R . grad phi_i + phi_i div R)``."""
    pts, w, bary = fem.quadrature_points(mesh)
    flat = pts.reshape(-1, mesh.dimension)
    g = _nodal_or_callable(mesh, transport.g, pts, bary)
    R = np.asarray(transport.R(flat)).reshape(pts.shape)
    divR = transport.div_R(flat) if transport.div_R is not None else _central_divergence(transport.R, flat)
    divR = np.asarray(divR).reshape(w.shape)
    RG = np.einsum("cqd,cid->cqi", R, mesh.cell_gradients)
    local = np.einsum("cq,cqi->ci", w * g, RG) + np.einsum("cq,qi->ci", w * g * divR, bary)
    b = np.zeros(mesh.n_vertices)
    np.add.at(b, mesh.cells, local)
    return b


def _g_l2(mesh, g):
    if g is None:
        return 0.0
    if callable(g):
        pts, w, _ = fem.quadrature_points(mesh)
        vals = np.asarray(g(pts.reshape(-1, mesh.dimension))).reshape(w.shape)
        return float(np.sqrt(np.sum(w * vals**2)))
    return fem.l2_norm(mesh, np.asarray(g, dtype=float))


def solve_adjoint_drift_bvp(mesh, problem, f, mu_omega=None, record_energy=True):
    """Weak solution of ``div(M grad u) - P . grad u = R . grad g``, ``u = f``."""
    if problem.side is not Side.ADJOINT_FORM:
        raise ValueError("problem is not in adjoint form")
    report = _gate(problem, mesh, mu_omega)
    system = drift_system(problem, mesh)
    tr = problem.rhs_transport
    load = None if tr is None else assemble_transport_load(mesh, tr)
    f_vals = fem._boundary_vector(mesh, f)
    u = fem.DirichletSolver(mesh, system).solve(f_vals, load)
    info = {"coercivity_margin": report.margin}
    if record_energy:
        info["energy_ratio"] = _energy_ratio(mesh, u, f_vals, _g_l2(mesh, None if tr is None else tr.g))
    return fem.FieldSolution(u, mesh, info)
