"""Quasilinear forward problem ``div(a(u) A grad u) = 0`` and its linearization.

The nonlinear solve is a damped Picard iteration on the P1 space with
``a(u)`` frozen at cell means. Two independent oracles come from the
Kirchhoff substitution ``w = beta(u)``, which turns the equation into
``div(A grad w) = 0``.
"""
from __future__ import annotations

import numpy as np

from . import fem, weak
from .errors import GateError, SolverError
from .families import KirchhoffTransform

DEFAULT_TOL = 1e-12
MAX_PRINCIPLE_SLACK = 1e-8


def cell_means(mesh, u):
    return np.asarray(u)[mesh.cells].mean(axis=1)


def harmonic_extension(mesh, A, boundary_values):
    """A-harmonic P1 extension of one or several boundary data columns."""
    K = fem.assemble_weighted_stiffness(mesh, 1.0, A)
    return fem.DirichletSolver(mesh, K).solve(boundary_values)


def _h1_diff_norms(mesh, new, old):
    return fem.h1_norm(mesh, new - old), fem.h1_norm(mesh, old)


def solve_quasilinear(mesh, family, A, f, tol=DEFAULT_TOL, damping=0.7, max_iter=200,
                      enforce_max_principle=None):
    """Damped Picard iteration ``u <- (1 - w) u + w S(u)``.

    ``S(u)`` solves the Dirichlet problem with stiffness weight ``a(u)``.
    The iteration stops once ``||S(u_k) - u_k||_{H1} <= tol ||u_k||_{H1}``
    (absolute ``tol`` when ``u_k`` is essentially zero) and returns
    ``S(u_k)``. The damping is halved whenever the residual grows.

    Parameters
    ----------
    enforce_max_principle : bool, optional
        Raise if ``max|u| > max|f| + 1e-8``. Defaults to on for constant
        isotropic ``A``, where the discrete bound is guaranteed.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    g = fem._boundary_vector(mesh, f)
    if not np.all(np.isfinite(g)):
        raise ValueError("boundary data must be finite")
    u = harmonic_extension(mesh, A, g)
    omega = float(damping)
    prev = np.inf
    history = []
    for it in range(1, max_iter + 1):
        K = fem.assemble_weighted_stiffness(mesh, family.a(cell_means(mesh, u)), A)
        new = fem.DirichletSolver(mesh, K).solve(g)
        res, scale = _h1_diff_norms(mesh, new, u)
        history.append(res)
        if res <= tol * scale or (scale <= tol and res <= tol):
            u = new
            break
        if res > prev:
            omega *= 0.5
        prev = res
        u = (1.0 - omega) * u + omega * new
    else:
        raise SolverError(f"Picard iteration hit the cap of {max_iter} iterations; "
                          "increase damping (smaller step) or max_iter", residual=history[-1],
                          iterations=max_iter)
    gap = float(np.abs(u).max() - np.abs(g).max())
    if enforce_max_principle is None:
        enforce_max_principle = bool(A.isotropic_constant)
    if enforce_max_principle and gap > MAX_PRINCIPLE_SLACK:
        raise SolverError(f"maximum principle violated: max|u| exceeds max|f| by {gap:.3e}")
    info = {"iterations": it, "residual": history[-1], "damping": omega,
            "max_principle_gap": gap, "history": history}
    return fem.FieldSolution(u, mesh, info)


def solve_quasilinear_oracle(mesh, family, A, f):
    """``beta^{-1}`` of the A-harmonic extension of ``beta(f)``, nodally."""
    kt = KirchhoffTransform(family)
    g = fem._boundary_vector(mesh, f)
    w = harmonic_extension(mesh, A, kt.beta(g))
    return fem.FieldSolution(kt.beta_inverse(w), mesh, {"oracle": "kirchhoff"})


def linearized_problem(mesh, family, A, u_base):
    """Drift problem with weight ``a(u)`` and drift ``a'(u) A grad u`` per cell."""
    u = u_base.nodal_values if isinstance(u_base, fem.FieldSolution) else np.asarray(u_base, dtype=float)
    ubar = cell_means(mesh, u)
    Ac = A(mesh.barycenters)
    P = family.a_prime(ubar)[:, None] * np.einsum("cij,cj->ci", Ac, fem.cell_gradient(mesh, u))
    return weak.DriftProblem(A, weight=family.a(ubar), drift_P=P)


def linearized_operator(mesh, family, A, u_base, mu_omega=None):
    """Gate-checked system matrix of the linearized problem.

    Returns ``(system, report)``. With barycentric evaluation this matrix is
    the exact Jacobian of the discrete Picard residual at ``u_base``.
    """
    problem = linearized_problem(mesh, family, A, u_base)
    try:
        report = weak._gate(problem, mesh, mu_omega)
    except GateError as exc:
        raise GateError("linearization-small-data",
                        f"{exc}; the base state is outside the small-data neighbourhood "
                        "where the linearized problem is known to be well posed") from exc
    return weak.drift_system(problem, mesh), report


def solve_linearized(mesh, family, A, u_base, h, mu_omega=None):
    """Linearized solution ``v`` of ``div(a(u) A grad v + a'(u) v A grad u) = 0``, ``v = h``."""
    problem = linearized_problem(mesh, family, A, u_base)
    try:
        return weak.solve_drift_divergence_bvp(mesh, problem, h, mu_omega=mu_omega)
    except GateError as exc:
        raise GateError("linearization-small-data",
                        f"{exc}; the base state is outside the small-data neighbourhood "
                        "where the linearized problem is known to be well posed") from exc


def linearized_oracle(mesh, family, A, u_base, h):
    """A-harmonic extension of ``a(f) h`` divided nodally by ``a(u_base)``.

    This is the derivative of the Kirchhoff oracle map. It coincides with
    ``solve_linearized`` for constant bases and agrees to discretization
    accuracy otherwise.
    """
    u = u_base.nodal_values if isinstance(u_base, fem.FieldSolution) else np.asarray(u_base, dtype=float)
    hv = fem._boundary_vector(mesh, h)
    f = u[mesh.boundary_vertices]
    w = harmonic_extension(mesh, A, family.a(f) * hv)
    return fem.FieldSolution(w / family.a(u), mesh, {"oracle": "kirchhoff-derivative"})
