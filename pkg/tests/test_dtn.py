import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qdtn import dtn, fem, forward
from qdtn.errors import GateError
from qdtn.experiments import gamma0_bump
from qdtn.families import const_family, exp_family, poly2_family, sin_family
from qdtn.mesh import Patch, build_structured_mesh, tag_boundary_regions


def _gamma0_data(mesh, rng):
    return fem.BoundaryTrace.on_gamma0(mesh, rng.standard_normal(len(mesh.gamma0_dofs)))


def test_constant_data_has_zero_flux(tagged_square16, I2):
    r = dtn.apply_dtn(tagged_square16, exp_family(), I2, fem.BoundaryTrace.constant(tagged_square16, 0.3))
    assert np.abs(r).max() < 1e-12


def test_pairing_independent_of_lift(tagged_square16, I2, rng):
    m = tagged_square16
    f = fem.BoundaryTrace.from_function(m, lambda x: 0.5 * np.sin(3 * x[:, 0]) + x[:, 1])
    r, u = dtn.apply_dtn(m, sin_family(2.0), I2, f, return_state=True)
    k = 5
    hat = np.zeros(m.n_vertices)
    hat[m.boundary_vertices[k]] = 1.0
    other = hat.copy()
    other[m.interior_vertices] = rng.standard_normal(len(m.interior_vertices))
    assert dtn.lifted_pairing(m, sin_family(2.0), I2, u, hat) == pytest.approx(r[k], abs=1e-12)
    assert dtn.lifted_pairing(m, sin_family(2.0), I2, u, other) == pytest.approx(r[k], abs=1e-9)


def test_green_identity(tagged_square16, I2, rng):
    # <Lambda f, f> = int a(u) A grad u . grad u >= 0
    m = tagged_square16
    f = _gamma0_data(m, rng)
    r, u = dtn.apply_dtn(m, poly2_family(2, 1), I2, f, return_state=True)
    K = fem.assemble_weighted_stiffness(m, poly2_family(2, 1).a(forward.cell_means(m, u.nodal_values)), I2)
    energy = u.nodal_values @ K @ u.nodal_values
    assert r @ f.nodal_values == pytest.approx(energy, rel=1e-10)
    assert energy > 0


def test_constant_family_scales_linear_dtn(tagged_square16, I2, rng):
    m = tagged_square16
    f = _gamma0_data(m, rng)
    r = dtn.apply_dtn(m, const_family(2.5), I2, f)
    L = dtn.linear_dtn_matrix(m, I2, localized=False)
    assert np.allclose(r, 2.5 * L.apply(f), atol=1e-11)


def test_linear_dtn_symmetric_on_gamma0(tagged_square16, I2):
    L = dtn.linear_dtn_matrix(tagged_square16, I2, localized=False)
    block = L.entries[L.columns]
    assert np.allclose(block, block.T, atol=1e-12)
    assert np.linalg.eigvalsh(0.5 * (block + block.T))[0] > 0


def test_localization_is_row_scaling(tagged_square16, I2):
    m = tagged_square16
    chi = dtn.chi_vector(m)
    L = dtn.linear_dtn_matrix(m, I2, localized=False)
    Lc = dtn.linear_dtn_matrix(m, I2, localized=True)
    assert np.allclose(Lc.entries, chi[:, None] * L.entries)
    assert np.all(Lc.entries[chi == 0] == 0)


def test_localized_dtn_support_gate(tagged_square16, I2):
    m = tagged_square16
    with pytest.raises(GateError, match="trace-support-gamma0"):
        dtn.localized_dtn(m, exp_family(), I2, 0.0, np.ones(len(m.boundary_vertices)))


@pytest.mark.parametrize("t", [0.0, 0.4, -0.7])
def test_frechet_at_constant_state_is_scaled_linear(tagged_square16, I2, t):
    # the drift vanishes at a constant base: d Lambda^t = a(t) Lambda^A
    fam = exp_family()
    D = dtn.frechet_dtn_matrix(tagged_square16, fam, I2, t)
    L = dtn.linear_dtn_matrix(tagged_square16, I2)
    assert np.allclose(D.entries, np.exp(t) * L.entries, atol=1e-11)


def test_frechet_columns_match_finite_differences(tagged_square16, I2):
    m = tagged_square16
    fam = sin_family(2.0)
    t = 0.3
    D = dtn.frechet_dtn_matrix(m, fam, I2, t)
    h = gamma0_bump(m)
    eps = 1e-5
    zero = np.zeros(len(m.boundary_vertices))
    fd = (dtn.localized_dtn(m, fam, I2, t, eps * h) - dtn.localized_dtn(m, fam, I2, t, (-eps) * h)) / (2 * eps)
    assert np.allclose(D.apply(h), fd, atol=1e-7)
    assert np.abs(dtn.localized_dtn(m, fam, I2, t, zero)).max() < 1e-12


def test_threads_do_not_change_result(tagged_square16, I2):
    a = dtn.frechet_dtn_matrix(tagged_square16, exp_family(), I2, 0.2, threads=1)
    b = dtn.frechet_dtn_matrix(tagged_square16, exp_family(), I2, 0.2, threads=3)
    assert np.array_equal(a.entries, b.entries)


def test_svd_and_power_agree(tagged_square16, I2):
    L = dtn.linear_dtn_matrix(tagged_square16, I2)
    s = dtn.operator_norm(L, method="svd")
    p = dtn.operator_norm(L, method="power", seed=7)
    assert p == pytest.approx(s, rel=1e-6)
    with pytest.raises(ValueError):
        dtn.operator_norm(L, method="lanczos")


def test_operator_norm_homogeneous_and_zero(tagged_square16, I2):
    L = dtn.linear_dtn_matrix(tagged_square16, I2)
    assert dtn.operator_norm(3.0 * L) == pytest.approx(3 * dtn.operator_norm(L), rel=1e-12)
    assert dtn.operator_norm(L - L) == 0.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_operator_norm_bounds_every_ratio(seed):
    m = tag_boundary_regions(build_structured_mesh("unit_square", 8), Patch(1, 1.0, ((0.25, 0.75),)), 0.125)
    L = dtn.linear_dtn_matrix(m, fem.identity_field(2))
    ctx = fem.build_norm_context(m)
    x = fem.BoundaryTrace.on_gamma0(m, np.random.default_rng(seed).standard_normal(len(m.gamma0_dofs)))
    ratio = ctx.functional_norm(L.apply(x)) / ctx.function_norm(x.nodal_values, 0.5)
    assert ratio <= dtn.operator_norm(L) * (1 + 1e-10)


def test_csv_header_and_roundtrip(tagged_square16, I2):
    D = dtn.frechet_dtn_matrix(tagged_square16, exp_family(), I2, 0.25)
    buf = io.StringIO()
    D.to_csv(buf, "family=exp")
    text = buf.getvalue()
    assert text.splitlines()[0] == "# qdtn-dtn v1 t=0.25 family=exp"
    back = np.loadtxt(io.StringIO(text), delimiter=",", comments="#")
    assert np.array_equal(back, D.entries)


def test_fd_validation_linear_family(tagged_square16, I2):
    rep = dtn.frechet_fd_validation(tagged_square16, const_family(2.0), I2, 0.0, gamma0_bump(tagged_square16))
    assert rep.linear and rep.slope is None


def test_fd_validation_quadratic_remainder(tagged_square16, I2):
    rep = dtn.frechet_fd_validation(tagged_square16, exp_family(), I2, 0.0, gamma0_bump(tagged_square16))
    assert rep.slope == pytest.approx(2.0, abs=0.1)
    assert set(rep.as_dict()) == {"epsilons", "errors", "slope", "linear"}
