"""P1 finite elements: assembly of the bilinear forms, Dirichlet solves,
boundary trace spaces with spectral H^{+-1/2} norms and the Poincare constant.

Coefficient fields are sampled at cell barycenters; drift terms use the
one-point barycentric rule, which is exact for per-cell constant fields.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import roots_jacobi

from .errors import SolverError

DIRECT_LIMIT = 200_000
SOLVER_RTOL = 1e-10


# -- quadrature ---------------------------------------------------------------

@lru_cache(maxsize=None)
def simplex_quadrature(n, points_per_direction):
    """Collapsed-coordinate Gauss-Jacobi rule on the reference n-simplex.

    Returns ``(bary, weights)``: barycentric coordinates ``(q, n+1)`` and
    weights summing to one, so ``int_T f ~= |T| * sum(w * f)``. Exact for
    polynomials of degree ``2 * points_per_direction - 1``.
    """
    m = points_per_direction
    rules = []
    for k in range(n):
        alpha = n - 1 - k
        x, w = roots_jacobi(m, alpha, 0.0)
        rules.append(((1.0 + x) / 2.0, w / 2.0 ** (alpha + 1)))
    grids = np.meshgrid(*[r[0] for r in rules], indexing="ij")
    wgrids = np.meshgrid(*[r[1] for r in rules], indexing="ij")
    s = [g.ravel() for g in grids]
    w = np.prod([g.ravel() for g in wgrids], axis=0)
    coords = []
    scale = np.ones_like(s[0])
    for k in range(n):
        coords.append(scale * s[k])
        scale = scale * (1.0 - s[k])
    lam = np.stack(coords, axis=1)
    bary = np.concatenate([1.0 - lam.sum(axis=1, keepdims=True), lam], axis=1)
    w = w * math.factorial(n)
    return bary, w / w.sum()


def quadrature_points(mesh, points_per_direction=3):
    """Physical quadrature points ``(cells, q, n)``, weights ``(cells, q)`` and barycentric table."""
    bary, w = simplex_quadrature(mesh.dimension, points_per_direction)
    pts = np.einsum("qi,cid->cqd", bary, mesh.vertices[mesh.cells])
    return pts, mesh.cell_volumes[:, None] * w[None, :], bary


# -- fields and traces --------------------------------------------------------

@dataclass(frozen=True)
class ConductivityMatrixField:
    """Symmetric uniformly elliptic matrix field ``A(x)``."""

    evaluator: object
    dimension: int
    name: str = "custom"
    isotropic_constant: bool = False
    ellipticity_kappa: float = field(default=None)

    def __post_init__(self):
        if self.ellipticity_kappa is None:
            object.__setattr__(self, "ellipticity_kappa", self._sample_kappa())

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.asarray(self.evaluator(x), dtype=float).reshape(len(x), self.dimension, self.dimension)

    def _sample_kappa(self, samples=257, seed=0):
        rng = np.random.default_rng(seed)
        mats = self(rng.uniform(-0.5, 1.5, size=(samples, self.dimension)))
        if not np.allclose(mats, np.swapaxes(mats, 1, 2), rtol=0, atol=0):
            raise ValueError("matrix field is not symmetric")
        lam_min = np.linalg.eigvalsh(mats)[:, 0].min()
        if lam_min <= 0:
            raise ValueError("matrix field is not positive definite")
        return float(max(1.0 / lam_min, np.abs(mats).max(), 1.0))

    def scaled(self, factor):
        ev = self.evaluator
        return ConductivityMatrixField(lambda x: factor * np.asarray(ev(x)), self.dimension,
                                       f"{factor}*{self.name}", self.isotropic_constant)


def identity_field(n):
    return ConductivityMatrixField(lambda x: np.broadcast_to(np.eye(n), (len(x), n, n)).copy(),
                                   n, "identity", True, 1.0)


def constant_field(matrix):
    mat = np.array(matrix, dtype=float)
    n = mat.shape[0]
    iso = bool(np.allclose(mat, mat[0, 0] * np.eye(n)))
    return ConductivityMatrixField(lambda x: np.broadcast_to(mat, (len(x), n, n)).copy(),
                                   n, "constant", iso)


def diagonal_variable_field(n, amplitude):
    """``diag(1 + amplitude * sin(2 pi x_k))``; elliptic for ``|amplitude| < 1``."""
    if not abs(amplitude) < 1:
        raise ValueError("amplitude must satisfy |amplitude| < 1")

    def ev(x):
        out = np.zeros((len(x), n, n))
        for k in range(n):
            out[:, k, k] = 1.0 + amplitude * np.sin(2 * np.pi * x[:, k])
        return out
    return ConductivityMatrixField(ev, n, f"diagvar({amplitude})", False)


@dataclass(frozen=True, eq=False)
class BoundaryTrace:
    """P1 boundary function: one value per boundary vertex."""

    nodal_values: np.ndarray
    support_tag: str = "ALL"

    def __post_init__(self):
        object.__setattr__(self, "nodal_values", np.asarray(self.nodal_values, dtype=float))
        if self.support_tag not in ("ALL", "GAMMA0"):
            raise ValueError(f"unknown support tag {self.support_tag!r}")

    def __len__(self):
        return len(self.nodal_values)

    def __add__(self, other):
        other_vals = other.nodal_values if isinstance(other, BoundaryTrace) else other
        tag = "GAMMA0" if (isinstance(other, BoundaryTrace) and self.support_tag == other.support_tag == "GAMMA0") else "ALL"
        return BoundaryTrace(self.nodal_values + other_vals, tag)

    def __mul__(self, scalar):
        return BoundaryTrace(scalar * self.nodal_values, self.support_tag)

    __rmul__ = __mul__

    def check_support(self, mesh):
        if self.support_tag == "GAMMA0":
            outside = np.ones(len(self), dtype=bool)
            outside[mesh.gamma0_dofs] = False
            if np.any(self.nodal_values[outside] != 0.0):
                raise ValueError("trace tagged GAMMA0 is nonzero outside GAMMA0")
        return self

    @classmethod
    def from_function(cls, mesh, func):
        return cls(np.asarray(func(mesh.vertices[mesh.boundary_vertices]), dtype=float))

    @classmethod
    def constant(cls, mesh, t):
        return cls(np.full(len(mesh.boundary_vertices), float(t)))

    @classmethod
    def on_gamma0(cls, mesh, values):
        vals = np.zeros(len(mesh.boundary_vertices))
        vals[mesh.gamma0_dofs] = values
        return cls(vals, "GAMMA0")

    @classmethod
    def gamma0_from_function(cls, mesh, func):
        coords = mesh.vertices[mesh.boundary_vertices[mesh.gamma0_dofs]]
        return cls.on_gamma0(mesh, func(coords))


@dataclass(frozen=True, eq=False)
class FieldSolution:
    nodal_values: np.ndarray
    mesh: object
    info: dict = field(default_factory=dict)

    def trace(self):
        return BoundaryTrace(self.nodal_values[self.mesh.boundary_vertices])

    def h1_norm(self):
        return h1_norm(self.mesh, self.nodal_values)

    def l2_norm(self):
        return l2_norm(self.mesh, self.nodal_values)


# -- assembly -----------------------------------------------------------------

def _to_sparse(mesh, local, rows=None, cols=None):
    k = mesh.dimension + 1
    cells = mesh.cells
    r = np.repeat(cells, k, axis=1).ravel() if rows is None else rows
    c = np.tile(cells, (1, k)).ravel() if cols is None else cols
    nv = mesh.n_vertices
    return sp.coo_matrix((local.ravel(), (r, c)), shape=(nv, nv)).tocsr()


def cell_values(mesh, c):
    """Broadcast a scalar / per-cell / per-vertex field to per-cell values."""
    arr = np.asarray(c, dtype=float)
    if arr.ndim == 0:
        return np.full(mesh.n_cells, float(arr))
    if arr.shape == (mesh.n_cells,):
        return arr
    if arr.shape == (mesh.n_vertices,):
        return arr[mesh.cells].mean(axis=1)
    raise ValueError(f"field of shape {arr.shape} matches neither cells nor vertices")


def cell_vectors(mesh, P):
    """Vector field as per-cell values ``(cells, n)``; callables are sampled at barycenters."""
    if callable(P):
        P = P(mesh.barycenters)
    arr = np.asarray(P, dtype=float)
    if arr.shape == (mesh.dimension,):
        return np.broadcast_to(arr, (mesh.n_cells, mesh.dimension)).copy()
    if arr.shape == (mesh.n_cells, mesh.dimension):
        return arr
    raise ValueError(f"vector field of shape {arr.shape} does not match the mesh")


def cell_gradient(mesh, u):
    """Gradient of a P1 function, constant per cell ``(cells, n)``."""
    return np.einsum("cid,ci->cd", mesh.cell_gradients, np.asarray(u)[mesh.cells])


def assemble_weighted_stiffness(mesh, c, A):
    """``K_ij = int c A grad(phi_j) . grad(phi_i)`` with ``c`` and ``A`` at barycenters."""
    cw = cell_values(mesh, c)
    if np.any(~(cw > 0)):
        raise ValueError("stiffness weight must be positive on every cell")
    Ac = A(mesh.barycenters)
    G = mesh.cell_gradients
    local = (cw * mesh.cell_volumes)[:, None, None] * np.einsum("cid,cde,cje->cij", G, Ac, G)
    K = _to_sparse(mesh, local)
    return ((K + K.T) * 0.5).tocsr()


@lru_cache(maxsize=16)
def _laplace_and_mass(mesh):
    K = assemble_weighted_stiffness(mesh, 1.0, identity_field(mesh.dimension))
    return K, assemble_mass(mesh)


def assemble_mass(mesh):
    n = mesh.dimension
    ref = (np.ones((n + 1, n + 1)) + np.eye(n + 1)) / ((n + 1) * (n + 2))
    local = mesh.cell_volumes[:, None, None] * ref[None]
    return _to_sparse(mesh, local)


def assemble_drift_divergence(mesh, P):
    """``D_ij = int phi_j P . grad(phi_i)`` (the ``u P . grad v`` part of the drift form)."""
    Pc = cell_vectors(mesh, P)
    n = mesh.dimension
    gp = np.einsum("cid,cd->ci", mesh.cell_gradients, Pc)
    w = mesh.cell_volumes / (n + 1)
    local = (w[:, None] * gp)[:, :, None] * np.ones((1, 1, n + 1))
    return _to_sparse(mesh, local)


def assemble_transport(mesh, P):
    """``C_ij = int phi_i P . grad(phi_j)`` (the ``v P . grad u`` part of the adjoint form)."""
    Pc = cell_vectors(mesh, P)
    n = mesh.dimension
    gp = np.einsum("cjd,cd->cj", mesh.cell_gradients, Pc)
    w = mesh.cell_volumes / (n + 1)
    local = np.ones((1, n + 1, 1)) * (w[:, None] * gp)[:, None, :]
    return _to_sparse(mesh, local)


def _cell_integrals(mesh, F, points_per_direction=3):
    """``int_T F`` per cell for a callable or per-cell-constant vector field."""
    if callable(F):
        pts, w, _ = quadrature_points(mesh, points_per_direction)
        vals = np.asarray(F(pts.reshape(-1, mesh.dimension))).reshape(pts.shape)
        return np.einsum("cq,cqd->cd", w, vals)
    return mesh.cell_volumes[:, None] * cell_vectors(mesh, F)


def assemble_divergence_load(mesh, F):
    """``b_i = int F . grad(phi_i)``: weak right-hand side of ``div(...) = div(F)``."""
    FI = _cell_integrals(mesh, F)
    local = np.einsum("cid,cd->ci", mesh.cell_gradients, FI)
    b = np.zeros(mesh.n_vertices)
    np.add.at(b, mesh.cells, local)
    return b


def assemble_source_load(mesh, s, points_per_direction=3):
    """``b_i = int s phi_i`` for a callable scalar source."""
    pts, w, bary = quadrature_points(mesh, points_per_direction)
    vals = np.asarray(s(pts.reshape(-1, mesh.dimension))).reshape(w.shape)
    local = np.einsum("cq,qi->ci", w * vals, bary)
    b = np.zeros(mesh.n_vertices)
    np.add.at(b, mesh.cells, local)
    return b


# -- norms --------------------------------------------------------------------

def h1_norm(mesh, u):
    K, M = _laplace_and_mass(mesh)
    return float(np.sqrt(max(u @ (K @ u) + u @ (M @ u), 0.0)))


def h1_seminorm(mesh, u):
    K, _ = _laplace_and_mass(mesh)
    return float(np.sqrt(max(u @ (K @ u), 0.0)))


def l2_norm(mesh, u):
    _, M = _laplace_and_mass(mesh)
    return float(np.sqrt(max(u @ (M @ u), 0.0)))


def l2_norm_cells(mesh, F):
    """L2 norm of a per-cell constant (vector) field."""
    F = np.asarray(F, dtype=float)
    sq = F**2 if F.ndim == 1 else (F**2).sum(axis=1)
    return float(np.sqrt(mesh.cell_volumes @ sq))


def l2_error(mesh, u, exact, points_per_direction=3):
    """``||u_h - exact||_{L2}`` by cellwise quadrature."""
    pts, w, bary = quadrature_points(mesh, points_per_direction)
    uh = np.einsum("qi,ci->cq", bary, np.asarray(u)[mesh.cells])
    ex = np.asarray(exact(pts.reshape(-1, mesh.dimension))).reshape(w.shape)
    return float(np.sqrt(np.sum(w * (uh - ex) ** 2)))


# -- Dirichlet solves ---------------------------------------------------------

class DirichletSolver:
    """Solve ``system u = load`` on interior dofs with prescribed boundary values.

    The interior block is factorized once; ``solve`` accepts several boundary
    data columns at a time.
    """

    def __init__(self, mesh, system, rtol=SOLVER_RTOL):
        self.mesh = mesh
        self.system = sp.csr_matrix(system)
        self.rtol = rtol
        I, B = mesh.interior_vertices, mesh.boundary_vertices
        self._KII = self.system[I][:, I].tocsc()
        self._KIB = self.system[I][:, B].tocsr()
        self._symmetric = abs(self._KII - self._KII.T).max() == 0 if self._KII.nnz else True
        self._lu = None
        if len(I) and len(I) < DIRECT_LIMIT:
            try:
                self._lu = spla.splu(self._KII)
            except RuntimeError as exc:
                raise SolverError(f"sparse factorization failed: {exc}") from exc

    def _solve_interior(self, rhs):
        if self._lu is not None:
            return self._lu.solve(rhs)
        ilu = spla.spilu(self._KII, drop_tol=1e-5, fill_factor=20)
        prec = spla.LinearOperator(self._KII.shape, ilu.solve)
        method = spla.cg if self._symmetric else spla.bicgstab
        cols = rhs.reshape(len(rhs), -1)
        out = np.empty_like(cols)
        for k in range(cols.shape[1]):
            x, info = method(self._KII, cols[:, k], rtol=self.rtol * 1e-2, M=prec, maxiter=5000)
            if info != 0:
                res = np.linalg.norm(cols[:, k] - self._KII @ x) / max(np.linalg.norm(cols[:, k]), 1e-300)
                raise SolverError("Krylov solver did not converge", residual=res, iterations=info)
            out[:, k] = x
        return out.reshape(rhs.shape)

    def solve(self, boundary_values, load=None):
        """Full nodal solution(s); ``boundary_values`` is ``(nb,)`` or ``(nb, k)``."""
        g = np.asarray(boundary_values, dtype=float)
        I, B = self.mesh.interior_vertices, self.mesh.boundary_vertices
        if g.shape[0] != len(B):
            raise ValueError(f"boundary data has {g.shape[0]} entries, mesh has {len(B)} boundary vertices")
        rhs = -(self._KIB @ g)
        if load is not None:
            load = np.asarray(load, dtype=float)
            rhs = rhs + (load[I] if g.ndim == 1 else load[I][:, None])
        u = np.zeros((self.mesh.n_vertices,) + g.shape[1:])
        u[B] = g
        if len(I):
            uI = self._solve_interior(rhs)
            res = np.linalg.norm(self._KII @ uI - rhs)
            scale = max(np.linalg.norm(rhs), np.abs(self._KII).max() * np.linalg.norm(uI), 1e-300)
            if res > self.rtol * scale:
                raise SolverError("interior residual above tolerance", residual=res / scale)
            u[I] = uI
        return u


def _boundary_vector(mesh, data):
    vals = data.nodal_values if isinstance(data, BoundaryTrace) else np.asarray(data, dtype=float)
    if len(vals) != len(mesh.boundary_vertices):
        raise ValueError("boundary data does not match the mesh boundary")
    return vals


def solve_dirichlet(mesh, system, boundary_data, load=None, drift=None):
    """Solve ``(system [+ drift]) u = load`` with ``u = boundary_data`` on the boundary."""
    if drift is not None:
        system = system + drift
    u = DirichletSolver(mesh, system).solve(_boundary_vector(mesh, boundary_data), load)
    return FieldSolution(u, mesh)


# -- boundary norms -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BoundaryNormContext:
    """Generalized eigenpairs of boundary Laplace-Beltrami stiffness vs mass.

    ``eigenvectors`` are mass-orthonormal, so the spectral coefficients of a
    boundary function ``phi`` are ``V^T M phi`` and those of a functional
    ``r`` (pairing vector) are ``V^T r``.
    """

    mesh: object
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    mass: np.ndarray
    stiffness: np.ndarray

    @property
    def count(self):
        return len(self.eigenvalues)

    def coefficients(self, phi):
        return self.eigenvectors.T @ (self.mass @ phi)

    def function_norm(self, phi, s):
        c = self.coefficients(phi)
        w = (1.0 + self.eigenvalues) ** s
        return float(np.sqrt(np.tensordot(w, c**2, axes=(0, 0))))

    def functional_norm(self, r):
        """H^{-1/2} norm of the functional with pairing vector ``r``."""
        c = self.eigenvectors.T @ r
        w = (1.0 + self.eigenvalues) ** -0.5
        return np.sqrt(np.tensordot(w, c**2, axes=(0, 0)))

    def function_gram(self, s):
        VM = self.eigenvectors.T @ self.mass
        return VM.T @ (((1.0 + self.eigenvalues) ** s)[:, None] * VM)

    def functional_gram(self):
        V = self.eigenvectors
        return V @ (((1.0 + self.eigenvalues) ** -0.5)[:, None] * V.T)


def boundary_matrices(mesh):
    """P1 stiffness and mass on the boundary surface (boundary-local numbering)."""
    facets = mesh.boundary_local_facets
    vol, G = mesh._facet_geometry
    k = facets.shape[1]
    nb = len(mesh.boundary_vertices)
    Sloc = vol[:, None, None] * np.einsum("fid,fjd->fij", G, G)
    ref = (np.ones((k, k)) + np.eye(k)) / (k * (k + 1))
    Mloc = vol[:, None, None] * ref[None]
    rows = np.repeat(facets, k, axis=1).ravel()
    cols = np.tile(facets, (1, k)).ravel()
    S = sp.coo_matrix((Sloc.ravel(), (rows, cols)), shape=(nb, nb)).toarray()
    M = sp.coo_matrix((Mloc.ravel(), (rows, cols)), shape=(nb, nb)).toarray()
    return 0.5 * (S + S.T), 0.5 * (M + M.T)


@lru_cache(maxsize=8)
def build_norm_context(mesh):
    S, M = boundary_matrices(mesh)
    lam, V = sla.eigh(S, M)
    return BoundaryNormContext(mesh, np.clip(lam, 0.0, None), V, M, S)


def boundary_norm(context, phi, s):
    """Spectral ``H^s(Gamma)`` norm of a boundary function, ``s`` in {1/2, -1/2, 0}."""
    vals = phi.nodal_values if isinstance(phi, BoundaryTrace) else np.asarray(phi, dtype=float)
    if len(vals) != context.count:
        raise ValueError(f"trace has {len(vals)} values, norm context expects {context.count}")
    if s not in (0.5, -0.5, 0, 0.0):
        raise ValueError(f"unsupported Sobolev index {s}")
    return context.function_norm(vals, s)


# -- Poincare constant --------------------------------------------------------

def poincare_constant(mesh, tol=1e-8, max_iter=1000):
    """``mu = lambda_1^{-1/2}`` for the discrete Dirichlet Laplacian (inverse iteration)."""
    I = mesh.interior_vertices
    if len(I) == 0:
        raise ValueError("mesh has no interior vertices")
    K, M = _laplace_and_mass(mesh)
    KII = K[I][:, I].tocsc()
    MII = M[I][:, I].tocsr()
    lu = spla.splu(KII)
    x = np.ones(len(I))
    lam_old = np.inf
    for it in range(1, max_iter + 1):
        x = lu.solve(MII @ x)
        x /= np.sqrt(x @ (MII @ x))
        lam = x @ (KII @ x)
        if abs(lam - lam_old) <= tol * lam:
            return float(lam ** -0.5)
        lam_old = lam
    raise SolverError("inverse power iteration stagnated", residual=abs(lam - lam_old) / lam, iterations=max_iter)


# -- debug dumps --------------------------------------------------------------

def dump_triplets(path, matrix, label="matrix"):
    """Plain-text triplets: header ``# qdtn-triplets v1 <label> <rows> <cols> <nnz>`` then ``i j value``."""
    coo = sp.coo_matrix(matrix)
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# qdtn-triplets v1 {label} {coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
        for i, j, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            fh.write(f"{i} {j} {v!r}\n")


def dump_vector(path, vec, label="vector"):
    vec = np.asarray(vec, dtype=float).ravel()
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# qdtn-vector v1 {label} {len(vec)}\n")
        for v in vec:
            fh.write(f"{v!r}\n")
