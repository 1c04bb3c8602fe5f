"""Reusable experiment batteries: drift-form manufactured solutions,
coercivity-gate sweeps, energy constants and the standard test data.
"""
from __future__ import annotations

import numpy as np

from . import fem, weak
from .errors import GateError
from .mesh import build_structured_mesh


def gamma0_bump(mesh):
    """Smooth ``sin^2`` bump on the GAMMA0 patch, zero elsewhere."""
    patch = mesh.regions.patch
    axes = patch.tangential_axes(mesh.dimension)

    def bump(x):
        out = np.ones(len(x))
        for ax, (lo, hi) in zip(axes, patch.bounds):
            s = np.clip((x[:, ax] - lo) / (hi - lo), 0.0, 1.0)
            out *= np.sin(np.pi * s) ** 2
        return out

    return fem.BoundaryTrace.gamma0_from_function(mesh, bump)


def observed_orders(hs, errors):
    hs, errors = np.asarray(hs, float), np.asarray(errors, float)
    return np.log(errors[:-1] / errors[1:]) / np.log(hs[:-1] / hs[1:])


# -- manufactured solutions on the unit square --------------------------------

DRIFT_P = np.array([0.3, -0.2])


def manufactured_divergence(N, P=DRIFT_P):
    """``div(grad u + u P) = div F`` with ``u* = x1 x2``; returns ``(L2 error, solution)``."""
    mesh = build_structured_mesh("unit_square", N)
    A = fem.identity_field(2)

    def exact(x):
        return x[:, 0] * x[:, 1]

    def F(x):
        return np.stack([x[:, 1], x[:, 0]], axis=1) + exact(x)[:, None] * P

    problem = weak.DriftProblem(A, drift_P=P, rhs_divF=F)
    u = weak.solve_drift_divergence_bvp(mesh, problem, fem.BoundaryTrace.from_function(mesh, exact))
    return fem.l2_error(mesh, u.nodal_values, exact), u


def manufactured_adjoint(N, P=DRIFT_P):
    """``lap u - P . grad u = R . grad g`` with ``u* = sin(pi x1) sin(pi x2)``, ``R = e1``.

    ``g`` is an antiderivative in ``x1`` of the right-hand side, so
    ``R . grad g = d g / d x1`` matches it exactly.
    """
    mesh = build_structured_mesh("unit_square", N)
    A = fem.identity_field(2)
    pi = np.pi

    def exact(x):
        return np.sin(pi * x[:, 0]) * np.sin(pi * x[:, 1])

    def g(x):
        X, Y = x[:, 0], x[:, 1]
        return (2 * pi * np.cos(pi * X) * np.sin(pi * Y) - P[0] * np.sin(pi * X) * np.sin(pi * Y)
                + P[1] * np.cos(pi * X) * np.cos(pi * Y))

    def R(x):
        return np.tile([1.0, 0.0], (len(x), 1))

    problem = weak.DriftProblem(A, drift_P=P, side=weak.Side.ADJOINT_FORM,
                                rhs_transport=weak.Transport(R, g, lambda x: np.zeros(len(x))))
    u = weak.solve_adjoint_drift_bvp(mesh, problem, fem.BoundaryTrace.from_function(mesh, exact))
    return fem.l2_error(mesh, u.nodal_values, exact), u


def manufactured_study(resolutions=(8, 16, 32)):
    """L2 errors, observed orders and energy constants for both drift forms."""
    hs = [1.0 / N for N in resolutions]
    out = {}
    for name, runner in (("divergence", manufactured_divergence), ("adjoint", manufactured_adjoint)):
        errs, ratios = [], []
        for N in resolutions:
            e, u = runner(N)
            errs.append(e)
            ratios.append(u.info["energy_ratio"])
        ratios = np.array(ratios)
        out[name] = {"resolutions": list(resolutions), "l2_errors": errs,
                     "orders": observed_orders(hs, errs).tolist(),
                     "energy_constants": ratios.tolist(),
                     "energy_spread": float((ratios.max() - ratios.min()) / ratios.min())}
    return out


# -- coercivity gate ------------------------------------------------------------

def coercivity_battery(mesh, cases=20, seed=0, mu_omega=None):
    """Random ``(P, beta)`` cases straddling the gate threshold.

    Each case draws ``A = c I`` and a drift of magnitude ``s beta / mu``
    with ``s`` in ``[0.5, 1.5]``; the first two cases sit exactly at the
    threshold and at 1.01 times it. Returns one dict per case.
    """
    rng = np.random.default_rng(seed)
    mu = weak._mu(mesh, mu_omega)
    n = mesh.dimension
    rows = []
    for k in range(cases):
        c = float(rng.uniform(0.5, 3.0))
        A = fem.constant_field(c * np.eye(n))
        beta = 0.5 * c
        s = 1.0 if k == 0 else 1.01 if k == 1 else float(rng.uniform(0.5, 1.5))
        direction = rng.standard_normal(n)
        direction /= np.linalg.norm(direction)
        if k == 0:
            # axis-aligned so that |P| equals the threshold without rounding
            direction = np.eye(n)[0]
        P = s * (beta / mu) * direction
        problem = weak.DriftProblem(A, drift_P=P)
        report = weak.check_coercivity(problem, mesh, mu)
        solved = True
        try:
            weak.solve_drift_divergence_bvp(mesh, problem, np.zeros(len(mesh.boundary_vertices)),
                                            mu, record_energy=False)
        except GateError:
            solved = False
        rows.append({"case": k, "c": c, "scale": s, "drift_sup": report.drift_sup,
                     "threshold": report.threshold, "accepted": bool(report), "solved": solved,
                     "expected": s <= 1.0})
    return rows
