import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qdtn import fem, forward
from qdtn.errors import GateError, SolverError
from qdtn.families import const_family, exp_family, poly2_family, sin_family
from qdtn.mesh import build_structured_mesh


@pytest.mark.parametrize("fam", [exp_family(), poly2_family(2, 1), sin_family(2)], ids=lambda f: f.name)
def test_constant_data_gives_constant_solution(square16, I2, fam):
    u = forward.solve_quasilinear(square16, fam, I2, fem.BoundaryTrace.constant(square16, 0.5))
    assert np.abs(u.nodal_values - 0.5).max() <= 1e-12


def test_constant_family_is_linear_solve(square16, I2, rng):
    f = rng.uniform(-1, 1, len(square16.boundary_vertices))
    u = forward.solve_quasilinear(square16, const_family(2.5), I2, f)
    ref = forward.harmonic_extension(square16, I2, f)
    assert np.abs(u.nodal_values - ref).max() < 1e-12
    assert u.info["iterations"] == 1


def test_affine_data_reproduced(square16, I2):
    # affine u solves div(a(u) grad u) = 0 only when a' = 0 or grad u = 0; use a constant family
    f = fem.BoundaryTrace.from_function(square16, lambda x: 0.3 * x[:, 0] - 0.2 * x[:, 1])
    u = forward.solve_quasilinear(square16, const_family(1.0), I2, f)
    assert np.allclose(u.nodal_values, square16.vertices @ [0.3, -0.2], atol=1e-12)


def test_agrees_with_kirchhoff_oracle(square16, I2):
    f = fem.BoundaryTrace.from_function(square16, lambda x: np.sin(np.pi * x[:, 0]) * x[:, 1])
    u = forward.solve_quasilinear(square16, exp_family(), I2, f)
    o = forward.solve_quasilinear_oracle(square16, exp_family(), I2, f)
    assert fem.h1_norm(square16, u.nodal_values - o.nodal_values) / fem.h1_norm(square16, o.nodal_values) < 2e-3


def test_oracle_gap_shrinks_with_refinement(I2):
    gaps = []
    for N in (8, 16):
        m = build_structured_mesh("unit_square", N)
        f = fem.BoundaryTrace.from_function(m, lambda x: np.sin(np.pi * x[:, 0]) * x[:, 1])
        u = forward.solve_quasilinear(m, exp_family(), I2, f)
        o = forward.solve_quasilinear_oracle(m, exp_family(), I2, f)
        gaps.append(fem.h1_norm(m, u.nodal_values - o.nodal_values))
    assert gaps[1] < 0.5 * gaps[0]


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_maximum_principle(seed):
    m = build_structured_mesh("unit_square", 8)
    f = np.random.default_rng(seed).uniform(-1, 1, len(m.boundary_vertices))
    u = forward.solve_quasilinear(m, sin_family(2.0), fem.identity_field(2), f)
    assert np.abs(u.nodal_values).max() <= np.abs(f).max() + 1e-8


def test_iteration_cap_raises_solver_error(square16, I2):
    f = fem.BoundaryTrace.from_function(square16, lambda x: 2 * x[:, 0])
    with pytest.raises(SolverError) as exc:
        forward.solve_quasilinear(square16, exp_family(), I2, f, max_iter=2)
    assert exc.value.iterations == 2


def test_invalid_inputs(square16, I2):
    with pytest.raises(ValueError):
        forward.solve_quasilinear(square16, exp_family(), I2, np.zeros(3))
    with pytest.raises(ValueError):
        forward.solve_quasilinear(square16, exp_family(), I2, np.zeros(len(square16.boundary_vertices)), tol=0)


def test_linearization_is_exact_jacobian(square16, I2, rng):
    # d/de [K(a(u + e v)) (u + e v)] at e = 0 equals the linearized system applied to v
    fam = exp_family()
    u = 0.3 * np.sin(square16.vertices @ [2.0, 1.0])
    v = rng.standard_normal(square16.n_vertices)

    def F(w):
        return fem.assemble_weighted_stiffness(square16, fam.a(forward.cell_means(square16, w)), I2) @ w

    eps = 1e-6
    fd = (F(u + eps * v) - F(u - eps * v)) / (2 * eps)
    system, report = forward.linearized_operator(square16, fam, I2, u)
    assert np.allclose(system @ v, fd, atol=1e-7)
    assert report.passed


def test_linearized_constant_base_matches_oracle(square16, I2, rng):
    fam = poly2_family(2.0, 1.0)
    base = np.full(square16.n_vertices, 0.4)
    h = rng.standard_normal(len(square16.boundary_vertices))
    v = forward.solve_linearized(square16, fam, I2, base, h)
    o = forward.linearized_oracle(square16, fam, I2, base, h)
    assert np.abs(v.nodal_values - o.nodal_values).max() < 1e-12


def test_linearized_large_base_refused(square16, I2):
    base = 5.0 * square16.vertices[:, 0]
    with pytest.raises(GateError, match="linearization-small-data"):
        forward.solve_linearized(square16, exp_family(), I2, base, np.zeros(len(square16.boundary_vertices)))
    with pytest.raises(GateError, match="linearization-small-data"):
        forward.linearized_operator(square16, exp_family(), I2, base)


def test_linearized_matches_fd_of_forward_map(square16, I2):
    fam = sin_family(2.0)
    f = fem.BoundaryTrace.from_function(square16, lambda x: 0.4 * x[:, 0] * x[:, 1])
    h = fem.BoundaryTrace.from_function(square16, lambda x: np.cos(np.pi * x[:, 1]))
    u = forward.solve_quasilinear(square16, fam, I2, f)
    v = forward.solve_linearized(square16, fam, I2, u, h)
    eps = 1e-5
    up = forward.solve_quasilinear(square16, fam, I2, f + eps * h).nodal_values
    um = forward.solve_quasilinear(square16, fam, I2, f + (-eps) * h).nodal_values
    assert np.abs((up - um) / (2 * eps) - v.nodal_values).max() < 1e-6
