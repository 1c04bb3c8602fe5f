"""Dirichlet-to-Neumann maps in the weak pairing form.

A boundary functional is stored as its pairing vector ``r_i = <psi, phi_i>``
over all boundary hat functions. For a discrete solution ``u`` the DtN
pairing is the boundary block of ``K(a(u)) u``: the lift of ``phi_i`` is the
hat function itself, and any other lift differs by an interior function on
which the discrete equation vanishes.
"""
from __future__ import annotations

import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import fem, forward
from .errors import GateError
from .mesh import eval_cutoff_chi

DENSE_SVD_LIMIT = 400


@dataclass(frozen=True, eq=False)
class DtnMatrix:
    """Dense matrix from GAMMA0 trace coefficients to boundary pairing vectors.

    ``entries`` has one row per boundary vertex and one column per entry of
    ``mesh.gamma0_dofs``.
    """

    entries: np.ndarray
    mesh: object
    label: str = ""
    localized: bool = False
    t: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def columns(self):
        return self.mesh.gamma0_dofs

    def apply(self, trace):
        vals = fem._boundary_vector(self.mesh, trace)
        return self.entries @ vals[self.columns]

    def __sub__(self, other):
        return DtnMatrix(self.entries - other.entries, self.mesh, f"{self.label}-{other.label}",
                         self.localized and other.localized, self.t)

    def __mul__(self, c):
        return DtnMatrix(c * self.entries, self.mesh, self.label, self.localized, self.t)

    __rmul__ = __mul__

    def to_csv(self, path_or_buf, header_extra=""):
        """CSV with a ``# qdtn-dtn v1 t=<t>`` header line."""
        t = "none" if self.t is None else repr(float(self.t))
        buf = io.StringIO()
        buf.write(f"# qdtn-dtn v1 t={t}{(' ' + header_extra) if header_extra else ''}\n")
        np.savetxt(buf, self.entries, delimiter=",", fmt="%.17g")
        text = buf.getvalue()
        if hasattr(path_or_buf, "write"):
            path_or_buf.write(text)
        else:
            with open(path_or_buf, "w", newline="\n") as fh:
                fh.write(text)


def chi_vector(mesh, width=None):
    width = mesh.regions.margin if width is None else width
    return eval_cutoff_chi(mesh, width).chi_values


def localize(mesh, pairing, chi=None):
    """Cutoff multiplier ``<chi psi, phi> = <psi, chi phi>`` on pairing vectors."""
    chi = chi_vector(mesh) if chi is None else chi
    p = np.asarray(pairing)
    return chi.reshape((-1,) + (1,) * (p.ndim - 1)) * p


def dtn_pairing(mesh, family, A, u):
    """Pairing vector of ``Lambda_a`` for a computed state ``u``."""
    u = u.nodal_values if isinstance(u, fem.FieldSolution) else np.asarray(u)
    K = fem.assemble_weighted_stiffness(mesh, family.a(forward.cell_means(mesh, u)), A)
    return (K @ u)[mesh.boundary_vertices]


def lifted_pairing(mesh, family, A, u, lift):
    """``int a(u) A grad u . grad(lift)`` for an arbitrary nodal lift."""
    u = u.nodal_values if isinstance(u, fem.FieldSolution) else np.asarray(u)
    K = fem.assemble_weighted_stiffness(mesh, family.a(forward.cell_means(mesh, u)), A)
    return float(np.asarray(lift) @ (K @ u))


def apply_dtn(mesh, family, A, f, tol=forward.DEFAULT_TOL, return_state=False):
    """Pairing vector of ``Lambda_a(f)``."""
    u = forward.solve_quasilinear(mesh, family, A, f, tol=tol)
    r = dtn_pairing(mesh, family, A, u)
    return (r, u) if return_state else r


def localized_dtn(mesh, family, A, t, f, chi=None, tol=forward.DEFAULT_TOL):
    """``chi Lambda_a(t + f)`` for ``f`` supported in GAMMA0."""
    vals = fem._boundary_vector(mesh, f)
    outside = np.ones(len(vals), dtype=bool)
    outside[mesh.gamma0_dofs] = False
    if np.any(vals[outside] != 0.0):
        raise GateError("trace-support-gamma0", "localized DtN needs data supported in GAMMA0")
    return localize(mesh, apply_dtn(mesh, family, A, vals + float(t), tol=tol), chi)


def _basis_columns(mesh):
    cols = mesh.gamma0_dofs
    E = np.zeros((len(mesh.boundary_vertices), len(cols)))
    E[cols, np.arange(len(cols))] = 1.0
    return E


def _solve_columns(solver, E, threads):
    if threads is None or threads <= 1 or E.shape[1] < 2:
        return solver.solve(E)
    chunks = np.array_split(np.arange(E.shape[1]), threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(lambda idx: solver.solve(E[:, idx]), chunks))
    return np.concatenate(parts, axis=1)


def frechet_dtn_matrix(mesh, family, A, t=0.0, u_base=None, localized=True, chi=None,
                       mu_omega=None, threads=None):
    """Matrix of ``d Lambda~_a^t(0)``, one linearized solve per GAMMA0 node.

    The base state defaults to ``u = t``; a non-constant ``u_base`` gives the
    differential of ``Lambda_a`` at that state instead.
    """
    if u_base is None:
        u_base = np.full(mesh.n_vertices, float(t))
    system, report = forward.linearized_operator(mesh, family, A, u_base, mu_omega)
    E = _basis_columns(mesh)
    V = _solve_columns(fem.DirichletSolver(mesh, system), E, threads)
    entries = (system @ V)[mesh.boundary_vertices]
    if localized:
        entries = localize(mesh, entries, chi)
    return DtnMatrix(entries, mesh, f"dLambda[{family.name}]", localized, float(t),
                     {"coercivity_margin": report.margin})


def linear_dtn_matrix(mesh, A, localized=True, chi=None, threads=None):
    """Matrix of the DtN map of ``div(A grad .) = 0`` on GAMMA0 data."""
    K = fem.assemble_weighted_stiffness(mesh, 1.0, A)
    V = _solve_columns(fem.DirichletSolver(mesh, K), _basis_columns(mesh), threads)
    entries = (K @ V)[mesh.boundary_vertices]
    if localized:
        entries = localize(mesh, entries, chi)
    return DtnMatrix(entries, mesh, "Lambda^A", localized)


# -- operator norms -----------------------------------------------------------

def _weighted_operator(M, ctx):
    """``B = D^{-1/4} V^T M L^{-T}`` whose largest singular value is the operator norm."""
    mesh = M.mesh
    cols = mesh.gamma0_dofs
    lam = ctx.eigenvalues
    VM = ctx.eigenvectors.T @ ctx.mass
    W_in = (VM[:, cols].T * (1.0 + lam) ** 0.5) @ VM[:, cols]
    L = np.linalg.cholesky(0.5 * (W_in + W_in.T))
    out = ((1.0 + lam) ** -0.25)[:, None] * (ctx.eigenvectors.T @ M.entries)
    return sla.solve_triangular(L, out.T, lower=True).T


def operator_norm(M, context=None, method="auto", seed=0, tol=1e-14, max_iter=20000):
    """``sup ||M x||_{H^{-1/2}} / ||x||_{H^{1/2}}`` over GAMMA0 data.

    ``method`` is ``"svd"``, ``"power"`` or ``"auto"`` (dense SVD for small
    matrices). Power iteration starts from a seeded Gaussian vector.
    """
    ctx = fem.build_norm_context(M.mesh) if context is None else context
    if ctx.count != M.entries.shape[0]:
        raise ValueError("norm context and DtN matrix live on different meshes")
    B = _weighted_operator(M, ctx)
    if not np.any(B):
        return 0.0
    if method == "auto":
        method = "svd" if min(B.shape) <= DENSE_SVD_LIMIT else "power"
    if method == "svd":
        return float(np.linalg.svd(B, compute_uv=False)[0])
    if method != "power":
        raise ValueError(f"unknown method {method!r}")
    return power_sigma_max(B, seed=seed, tol=tol, max_iter=max_iter)


def power_sigma_max(B, seed=0, tol=1e-14, max_iter=20000):
    """Largest singular value by power iteration on ``B^T B``."""
    x = np.random.default_rng(seed).standard_normal(B.shape[1])
    x /= np.linalg.norm(x)
    sigma2 = 0.0
    for _ in range(max_iter):
        y = B.T @ (B @ x)
        new = float(x @ y)
        ny = np.linalg.norm(y)
        if ny == 0:
            return 0.0
        x = y / ny
        if abs(new - sigma2) <= tol * new:
            return float(np.sqrt(new))
        sigma2 = new
    return float(np.sqrt(sigma2))


# -- finite-difference check --------------------------------------------------

@dataclass(frozen=True)
class SlopeReport:
    epsilons: tuple
    errors: tuple
    slope: float | None
    linear: bool

    def as_dict(self):
        return {"epsilons": list(self.epsilons), "errors": list(self.errors),
                "slope": self.slope, "linear": self.linear}


def frechet_fd_validation(mesh, family, A, t, h, epsilons=(1e-1, 3e-2, 1e-2, 3e-3),
                          tol=forward.DEFAULT_TOL, context=None, chi=None):
    """Taylor remainders ``||Lambda~(eps h) - Lambda~(0) - eps dLambda~ h||_{H^{-1/2}}``.

    The slope is a least-squares fit in log-log coordinates; ``None`` when
    every remainder is below ``1e-10`` (the map is linear at this data).
    """
    ctx = fem.build_norm_context(mesh) if context is None else context
    hv = fem._boundary_vector(mesh, h)
    base = localized_dtn(mesh, family, A, t, np.zeros_like(hv), chi, tol)
    D = frechet_dtn_matrix(mesh, family, A, t, chi=chi)
    lin = D.apply(hv)
    errs = []
    for eps in epsilons:
        r = localized_dtn(mesh, family, A, t, eps * hv, chi, tol) - base - eps * lin
        errs.append(float(ctx.functional_norm(r)))
    errs = np.array(errs)
    if np.all(errs <= 1e-10):
        return SlopeReport(tuple(epsilons), tuple(errs.tolist()), None, True)
    slope = float(np.polyfit(np.log(epsilons), np.log(np.maximum(errs, 1e-300)), 1)[0])
    return SlopeReport(tuple(epsilons), tuple(errs.tolist()), slope, False)
