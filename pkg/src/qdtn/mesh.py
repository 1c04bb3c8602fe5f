"""Structured simplicial meshes of the unit square / cube with tagged boundary
regions, the boundary cutoff and exterior probe points.

Boundary regions follow the layout used throughout the package: a patch
``GAMMA0`` in the interior of one flat face, an annulus ``GAMMA1_ANNULUS``
obtained by dilating the patch, and the rest of the boundary.
"""
from __future__ import annotations

import dataclasses
import enum
import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import GateError

DOMAINS = {"unit_square": 2, "unit_cube": 3}
_GEOM_TOL = 1e-12


class Region(enum.IntEnum):
    GAMMA0 = 0
    GAMMA1_ANNULUS = 1
    GAMMA_REST = 2


@dataclass(frozen=True)
class Patch:
    """Axis-aligned patch on the face ``x[axis] == side`` of the unit box.

    ``bounds`` lists ``(lo, hi)`` for the remaining coordinates in increasing
    axis order.
    """

    axis: int
    side: float
    bounds: tuple

    def tangential_axes(self, n):
        return [k for k in range(n) if k != self.axis]

    def dilated(self, margin):
        return Patch(self.axis, self.side,
                     tuple((lo - margin, hi + margin) for lo, hi in self.bounds))


@dataclass(frozen=True)
class RegionLayout:
    patch: Patch
    margin: float


def simplex_geometry(points):
    """Volumes and barycentric gradients for a stack of simplices.

    ``points`` has shape ``(m, k+1, d)`` with ``k <= d``. Returns
    ``(volumes, grads)`` where ``grads[c, i]`` is the (tangential) gradient of
    the i-th barycentric coordinate, shape ``(m, k+1, d)``.
    """
    points = np.asarray(points, dtype=float)
    k = points.shape[1] - 1
    edges = points[:, 1:, :] - points[:, :1, :]          # (m, k, d)
    metric = np.einsum("mid,mjd->mij", edges, edges)     # (m, k, k)
    det = np.linalg.det(metric)
    volumes = np.sqrt(np.clip(det, 0.0, None)) / math.factorial(k)
    inv = np.linalg.inv(metric)
    # gradients of lambda_1..lambda_k: inv(metric) @ edges
    g = np.einsum("mij,mjd->mid", inv, edges)
    grads = np.concatenate([-g.sum(axis=1, keepdims=True), g], axis=1)
    return volumes, grads


@dataclass(frozen=True, eq=False)
class TaggedMesh:
    """Immutable simplicial mesh with tagged boundary facets."""

    dimension: int
    vertices: np.ndarray
    cells: np.ndarray
    boundary_facets: np.ndarray
    facet_tags: np.ndarray
    cells_per_side: int
    domain: str
    regions: RegionLayout | None = None
    mesh_size_h: float = field(init=False)

    def __post_init__(self):
        for name in ("vertices", "cells", "boundary_facets", "facet_tags"):
            getattr(self, name).setflags(write=False)
        object.__setattr__(self, "mesh_size_h", math.sqrt(self.dimension) / self.cells_per_side)

    @property
    def spacing(self):
        """Grid spacing ``1 / cells_per_side`` (cell edge length)."""
        return 1.0 / self.cells_per_side

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_cells(self):
        return len(self.cells)

    # -- cell geometry -----------------------------------------------------
    @cached_property
    def _cell_geometry(self):
        return simplex_geometry(self.vertices[self.cells])

    @property
    def cell_volumes(self):
        return self._cell_geometry[0]

    @property
    def cell_gradients(self):
        return self._cell_geometry[1]

    @cached_property
    def barycenters(self):
        return self.vertices[self.cells].mean(axis=1)

    @cached_property
    def cell_diameters(self):
        pts = self.vertices[self.cells]
        d = 0.0
        for i, j in itertools.combinations(range(self.dimension + 1), 2):
            d = np.maximum(d, np.linalg.norm(pts[:, i] - pts[:, j], axis=1))
        return d

    # -- boundary ----------------------------------------------------------
    @cached_property
    def boundary_vertices(self):
        """Sorted global indices of boundary vertices."""
        return np.unique(self.boundary_facets)

    @cached_property
    def interior_vertices(self):
        mask = np.ones(self.n_vertices, dtype=bool)
        mask[self.boundary_vertices] = False
        return np.flatnonzero(mask)

    @cached_property
    def boundary_local_facets(self):
        """Boundary facets expressed in boundary-local vertex numbering."""
        return np.searchsorted(self.boundary_vertices, self.boundary_facets)

    @cached_property
    def _facet_geometry(self):
        return simplex_geometry(self.vertices[self.boundary_facets])

    @cached_property
    def facet_normals(self):
        pts = self.vertices[self.boundary_facets]
        if self.dimension == 2:
            t = pts[:, 1] - pts[:, 0]
            nrm = np.stack([t[:, 1], -t[:, 0]], axis=1)
        else:
            nrm = np.cross(pts[:, 1] - pts[:, 0], pts[:, 2] - pts[:, 0])
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        outward = pts.mean(axis=1) - 0.5
        flip = np.einsum("fd,fd->f", nrm, outward) < 0
        nrm[flip] *= -1
        return nrm

    @cached_property
    def boundary_normals(self):
        """Outward unit normal per boundary vertex (averaged at edges/corners)."""
        acc = np.zeros((len(self.boundary_vertices), self.dimension))
        for k in range(self.dimension):
            np.add.at(acc, self.boundary_local_facets[:, k], self.facet_normals)
        return acc / np.linalg.norm(acc, axis=1, keepdims=True)

    @cached_property
    def gamma0_closure(self):
        """Boundary-local indices of vertices of GAMMA0 facets."""
        f = self.boundary_local_facets[self.facet_tags == Region.GAMMA0]
        return np.unique(f)

    def _vertices_only_touching(self, allowed):
        ok = np.isin(self.facet_tags, allowed)
        bad = np.zeros(len(self.boundary_vertices), dtype=bool)
        bad[np.unique(self.boundary_local_facets[~ok])] = True
        return ~bad

    @cached_property
    def gamma0_dofs(self):
        """Boundary-local indices whose hat functions are supported in closed GAMMA0."""
        inner = self._vertices_only_touching([Region.GAMMA0])
        inner[np.setdiff1d(np.arange(len(inner)), self.gamma0_closure)] = False
        return np.flatnonzero(inner)

    @cached_property
    def gamma1_interior(self):
        """Boundary-local mask: vertices all of whose facets lie in GAMMA0 or the annulus."""
        return self._vertices_only_touching([Region.GAMMA0, Region.GAMMA1_ANNULUS])

    def on_face(self, patch):
        coords = self.vertices[self.boundary_vertices]
        return np.abs(coords[:, patch.axis] - patch.side) <= _GEOM_TOL


def _grid_vertices(n, N):
    axes = [np.linspace(0.0, 1.0, N + 1)] * n
    mesh = np.meshgrid(*axes, indexing="ij")
    # index = i0 + (N+1) i1 + (N+1)^2 i2
    return np.stack([m.ravel(order="F") for m in mesh], axis=1)


def _square_cells(N):
    cells = []
    idx = lambda i, j: i + (N + 1) * j
    for j in range(N):
        for i in range(N):
            v00, v10, v01, v11 = idx(i, j), idx(i + 1, j), idx(i, j + 1), idx(i + 1, j + 1)
            cells.append((v00, v10, v11))
            cells.append((v00, v11, v01))
    return np.array(cells, dtype=np.int64)


def _cube_cells(N):
    # Kuhn subdivision: one tetrahedron per permutation of the axes, all
    # sharing the main diagonal of the cube cell, so neighbours conform.
    stride = np.array([1, N + 1, (N + 1) ** 2])
    corners = np.array(list(itertools.product(range(N), repeat=3)))[:, ::-1]
    base = corners @ stride
    cells = []
    for perm in itertools.permutations(range(3)):
        offs = [0]
        for axis in perm:
            offs.append(offs[-1] + stride[axis])
        cells.append(base[:, None] + np.array(offs)[None, :])
    return np.concatenate(cells, axis=0).astype(np.int64)


def _boundary_facets(cells, n):
    faces = np.concatenate([np.delete(cells, k, axis=1) for k in range(n + 1)], axis=0)
    faces = np.sort(faces, axis=1)
    uniq, counts = np.unique(faces, axis=0, return_counts=True)
    return uniq[counts == 1]


def build_structured_mesh(domain, cells_per_side):
    """Conforming simplicial mesh of the unit square or unit cube.

    Squares are split along one diagonal (2 triangles per cell), cubes by the
    Kuhn subdivision (6 tetrahedra per cell).
    """
    if domain not in DOMAINS:
        raise ValueError(f"unknown domain {domain!r}; expected one of {sorted(DOMAINS)}")
    if int(cells_per_side) != cells_per_side or cells_per_side < 2:
        raise ValueError(f"cells_per_side must be an integer >= 2, got {cells_per_side}")
    N = int(cells_per_side)
    n = DOMAINS[domain]
    vertices = _grid_vertices(n, N)
    cells = _square_cells(N) if n == 2 else _cube_cells(N)
    facets = _boundary_facets(cells, n)
    tags = np.full(len(facets), Region.GAMMA_REST, dtype=np.int8)
    return TaggedMesh(n, vertices, cells, facets, tags, N, domain)


def _in_box(coords, bounds, tol=_GEOM_TOL):
    ok = np.ones(len(coords), dtype=bool)
    for k, (lo, hi) in enumerate(bounds):
        ok &= (coords[:, k] >= lo - tol) & (coords[:, k] <= hi + tol)
    return ok


def _facets_in_patch(mesh, patch):
    pts = mesh.vertices[mesh.boundary_facets]            # (f, n, n)
    on_face = np.all(np.abs(pts[:, :, patch.axis] - patch.side) <= _GEOM_TOL, axis=1)
    tang = pts[:, :, patch.tangential_axes(mesh.dimension)]
    inside = np.ones(len(pts), dtype=bool)
    for v in range(pts.shape[1]):
        inside &= _in_box(tang[:, v, :], patch.bounds)
    return on_face & inside


def tag_boundary_regions(mesh, gamma0_spec, margin):
    """Tag GAMMA0 (the patch), GAMMA1_ANNULUS (dilation by ``margin`` minus the
    patch) and GAMMA_REST. Returns a new mesh."""
    patch = gamma0_spec
    n = mesh.dimension
    if patch.axis not in range(n) or patch.side not in (0.0, 1.0):
        raise ValueError(f"patch must lie on a face x[axis] in {{0, 1}}, got axis={patch.axis} side={patch.side}")
    if len(patch.bounds) != n - 1:
        raise ValueError(f"patch needs {n - 1} tangential bounds, got {len(patch.bounds)}")
    if not margin > 0:
        raise GateError("gamma0-compact-in-gamma1", f"margin must be > 0, got {margin}")
    for lo, hi in patch.bounds:
        if not lo < hi:
            raise ValueError(f"empty patch interval ({lo}, {hi})")
        if lo - margin < -_GEOM_TOL or hi + margin > 1.0 + _GEOM_TOL:
            raise GateError("gamma1-within-face",
                            f"patch ({lo}, {hi}) dilated by {margin} leaves the face [0, 1]")

    in0 = _facets_in_patch(mesh, patch)
    in1 = _facets_in_patch(mesh, patch.dilated(margin))
    tags = np.full(len(in0), Region.GAMMA_REST, dtype=np.int8)
    tags[in1] = Region.GAMMA1_ANNULUS
    tags[in0] = Region.GAMMA0
    tagged = dataclasses.replace(mesh, facet_tags=tags,
                                 regions=RegionLayout(patch, float(margin)))
    if len(tagged.gamma0_dofs) == 0:
        raise GateError("gamma0-nonempty", "the patch contains no interior mesh vertex; refine the mesh")
    if not np.all(tagged.gamma1_interior[tagged.gamma0_closure]):
        raise GateError("gamma0-compact-in-gamma1",
                        f"margin {margin} does not separate closed GAMMA0 from GAMMA_REST on this mesh")
    return tagged


@dataclass(frozen=True)
class CutoffField:
    chi_values: np.ndarray
    smoothness_width: float


def quintic_blend(s):
    """C^2 step: 1 for s <= 0, 0 for s >= 1, 0.5 at s = 1/2."""
    s = np.clip(np.asarray(s, dtype=float), 0.0, 1.0)
    return 1.0 - s**3 * (10.0 - 15.0 * s + 6.0 * s**2)


def _distance_to_box(coords, bounds):
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    gap = np.maximum(np.maximum(lo - coords, coords - hi), 0.0)
    return np.linalg.norm(gap, axis=1)


def eval_cutoff_chi(mesh, width):
    """Cutoff equal to 1 on closed GAMMA0 and vanishing outside GAMMA1."""
    if mesh.regions is None:
        raise ValueError("mesh has no tagged regions; call tag_boundary_regions first")
    if not width > 0:
        raise ValueError(f"cutoff width must be > 0, got {width}")
    if width > mesh.regions.margin + _GEOM_TOL:
        raise GateError("chi-support-in-gamma1",
                        f"cutoff width {width} exceeds the tagging margin {mesh.regions.margin}")
    patch = mesh.regions.patch
    coords = mesh.vertices[mesh.boundary_vertices][:, patch.tangential_axes(mesh.dimension)]
    closure = coords[mesh.gamma0_closure]
    footprint = list(zip(closure.min(axis=0), closure.max(axis=0)))
    dist = _distance_to_box(coords, footprint)
    chi = quintic_blend(dist / width)
    chi[~mesh.on_face(patch)] = 0.0
    chi[~mesh.gamma1_interior] = 0.0
    chi[mesh.gamma0_closure] = 1.0
    return CutoffField(chi, float(width))


def distance_to_domain(point):
    """Euclidean distance from ``point`` to the closed unit box."""
    p = np.asarray(point, dtype=float)
    return float(np.linalg.norm(np.maximum(np.maximum(-p, p - 1.0), 0.0)))


@dataclass(frozen=True)
class ProbeSpec:
    anchor_x0: np.ndarray
    direction_xi: np.ndarray
    offset_delta: float
    cone_constant_c: float
    ball_radius_r0: float
    delta_max: float
    recovery_set_upsilon: tuple


def make_probe_spec(mesh, x0, xi, r0, delta, *, cone_c=1.0, delta_max=None):
    """Validate probe geometry against a tagged mesh.

    Checks that ``x0`` is a vertex of GAMMA0, that the boundary part of the
    closed ball ``B(x0, r0)`` lies inside GAMMA0, and that the exterior cone
    condition ``dist(x0 + d xi, closure(Omega)) >= c d`` holds for
    ``0 < d <= delta_max`` (``delta_max`` defaults to ``max(r0, delta)``).
    """
    x0 = np.asarray(x0, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if x0.shape != (mesh.dimension,) or xi.shape != (mesh.dimension,):
        raise ValueError("x0 and xi must have the mesh dimension")
    norm = np.linalg.norm(xi)
    if abs(norm - 1.0) > 1e-12:
        raise ValueError(f"direction xi must be a unit vector, |xi| = {norm}")
    if not 0 < cone_c <= 1:
        raise ValueError(f"cone constant must lie in (0, 1], got {cone_c}")
    if not r0 > 0:
        raise ValueError(f"ball radius r0 must be > 0, got {r0}")
    bcoords = mesh.vertices[mesh.boundary_vertices]
    d0 = np.linalg.norm(bcoords - x0, axis=1)
    anchor = int(np.argmin(d0))
    if d0[anchor] > _GEOM_TOL or anchor not in set(mesh.gamma0_dofs.tolist()):
        raise GateError("probe-anchor-in-gamma0", f"x0={x0.tolist()} is not an interior vertex of GAMMA0")
    in_ball = np.flatnonzero(d0 <= r0 + _GEOM_TOL)
    if not np.all(np.isin(in_ball, mesh.gamma0_dofs)):
        raise GateError("probe-ball-in-gamma0", f"B(x0, {r0}) meets the boundary outside GAMMA0")
    delta_max = float(max(r0, delta) if delta_max is None else delta_max)
    if not 0 < delta <= delta_max:
        raise GateError("probe-offset-range", f"delta={delta} must lie in (0, {delta_max}]")
    for d in np.linspace(delta_max / 64, delta_max, 64):
        if distance_to_domain(x0 + d * xi) < cone_c * d * (1 - 1e-12):
            raise GateError("probe-exterior-cone",
                            f"dist(x0 + {d:.4g} xi, Omega) < {cone_c} * {d:.4g}")
    return ProbeSpec(x0, xi, float(delta), float(cone_c), float(r0), delta_max, (anchor,))


def probe_point(spec, delta):
    """Exterior point ``x0 + delta * xi``."""
    if not delta > 0:
        raise GateError("probe-exterior", f"delta must be > 0, got {delta}")
    if delta > spec.delta_max * (1 + 1e-12):
        raise GateError("probe-offset-range", f"delta={delta} exceeds delta_max={spec.delta_max}")
    y = spec.anchor_x0 + delta * spec.direction_xi
    dist = distance_to_domain(y)
    if dist < spec.cone_constant_c * delta * (1 - 1e-12):
        raise GateError("probe-exterior-cone", f"dist(y, Omega)={dist:.4g} < c*delta")
    return y


# -- mesh cache file ---------------------------------------------------------

def save_mesh(mesh, path):
    """Write the plain-text ``QDTN-MESH v1`` format."""
    with open(path, "w", newline="\n") as fh:
        fh.write(f"QDTN-MESH v1 {mesh.dimension} {mesh.n_vertices} {mesh.n_cells}\n")
        for v in mesh.vertices:
            fh.write(" ".join(repr(float(c)) for c in v) + "\n")
        for c in mesh.cells:
            fh.write(" ".join(str(int(i)) for i in c) + "\n")
        fh.write(f"DOMAIN {mesh.domain} {mesh.cells_per_side}\n")
        fh.write(f"FACETS {len(mesh.boundary_facets)}\n")
        for f, tag in zip(mesh.boundary_facets, mesh.facet_tags):
            fh.write(" ".join(str(int(i)) for i in f) + f" {int(tag)}\n")
        if mesh.regions is not None:
            p = mesh.regions.patch
            flat = " ".join(repr(float(b)) for pair in p.bounds for b in pair)
            fh.write(f"REGIONS {p.axis} {p.side!r} {mesh.regions.margin!r} {flat}\n")


def load_mesh(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    head = lines[0].split()
    if head[:2] != ["QDTN-MESH", "v1"]:
        raise ValueError(f"{path}: not a QDTN-MESH v1 file")
    n, nv, nc = (int(x) for x in head[2:5])
    vertices = np.array([[float(x) for x in ln.split()] for ln in lines[1:1 + nv]])
    cells = np.array([[int(x) for x in ln.split()] for ln in lines[1 + nv:1 + nv + nc]], dtype=np.int64)
    pos = 1 + nv + nc
    _, domain, res = lines[pos].split()
    nf = int(lines[pos + 1].split()[1])
    rows = np.array([[int(x) for x in ln.split()] for ln in lines[pos + 2:pos + 2 + nf]], dtype=np.int64)
    regions = None
    rest = lines[pos + 2 + nf:]
    if rest and rest[0].startswith("REGIONS"):
        tok = rest[0].split()[1:]
        b = [float(x) for x in tok[3:]]
        patch = Patch(int(tok[0]), float(tok[1]), tuple(zip(b[0::2], b[1::2])))
        regions = RegionLayout(patch, float(tok[2]))
    return TaggedMesh(n, vertices, cells, rows[:, :-1], rows[:, -1].astype(np.int8),
                      int(res), domain, regions)
