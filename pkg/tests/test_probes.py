import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qdtn import fem, probes
from qdtn.errors import GateError

A_ANISO = fem.constant_field([[2.0, 0.3, 0.0], [0.3, 1.0, 0.1], [0.0, 0.1, 1.5]])


def test_sphere_area():
    assert probes.sphere_area(2) == pytest.approx(2 * math.pi)
    assert probes.sphere_area(3) == pytest.approx(4 * math.pi)
    assert probes.sphere_area(4) == pytest.approx(2 * math.pi**2)


def test_parametrix_identity_closed_forms(I2, I3):
    y3 = np.zeros(3)
    x3 = np.array([0.3, -0.4, 1.2])
    assert probes.parametrix_value(probes.Parametrix(I3), x3, y3) == pytest.approx(1 / (4 * math.pi * 1.3))
    x2 = np.array([0.6, 0.8])
    assert probes.parametrix_value(probes.Parametrix(I2), x2, np.zeros(2)) == pytest.approx(0.0, abs=1e-15)
    x2 = np.array([0.0, 2.0])
    assert probes.parametrix_value(probes.Parametrix(I2), x2, np.zeros(2)) == pytest.approx(-math.log(2) / (2 * math.pi))


def test_parametrix_pole_rejected(I3):
    with pytest.raises(ValueError):
        probes.parametrix_value(probes.Parametrix(I3), np.zeros(3), np.zeros(3))


@pytest.mark.parametrize("A", [A_ANISO, fem.identity_field(3)], ids=["aniso", "identity"])
def test_gradient_matches_finite_difference(A):
    p = probes.Parametrix(A, sigma=1.7)
    y = np.array([0.5, 0.5, 1.2])
    x = np.array([0.2, 0.7, 0.4])
    h = 1e-6
    fd = [(probes.parametrix_value(p, x + h * e, y) - probes.parametrix_value(p, x - h * e, y)) / (2 * h)
          for e in np.eye(3)]
    assert np.allclose(probes.parametrix_gradient(p, x, y), fd, atol=1e-8)


@settings(max_examples=20, deadline=None)
@given(st.floats(-0.4, 0.4), st.floats(-0.4, 0.4), st.floats(0.3, 0.9))
def test_parametrix_solves_frozen_equation(a, b, c):
    # div(sigma A grad H) = 0 away from the pole, checked by central differences of the gradient
    p = probes.Parametrix(A_ANISO, sigma=2.0)
    y = np.zeros(3)
    x = np.array([a, b, c])
    M = p.frozen_matrix(y)
    h = 1e-5
    div = 0.0
    for k, e in enumerate(np.eye(3)):
        gp = M @ probes.parametrix_gradient(p, x + h * e, y)
        gm = M @ probes.parametrix_gradient(p, x - h * e, y)
        div += (gp[k] - gm[k]) / (2 * h)
    scale = np.linalg.norm(M @ probes.parametrix_gradient(p, x, y)) / np.linalg.norm(x)
    assert abs(div) < 1e-5 * scale


def test_parametrix_flux_through_sphere(I3):
    # the flux of -A grad H through any sphere around the pole is 1
    p = probes.Parametrix(I3)
    rng = np.random.default_rng(0)
    d = rng.standard_normal((200000, 3))
    d /= np.linalg.norm(d, axis=1)[:, None]
    g = probes.parametrix_gradient(p, 0.5 * d, np.zeros(3))
    flux = -np.mean(np.einsum("md,md->m", g, d)) * 4 * math.pi * 0.25
    assert flux == pytest.approx(1.0, rel=1e-12)


def test_ell_n():
    assert probes.ell_n(3, 0.1) == 1.0
    assert probes.ell_n(4, 0.1) == pytest.approx(math.sqrt(math.log(10)))
    assert probes.ell_n(6, 0.25) == pytest.approx(0.25**-1)
    for bad in ((2, 0.1), (3, 0.0), (3, 1.0)):
        with pytest.raises(ValueError):
            probes.ell_n(*bad)


def test_build_probe_support_and_core(tagged_cube16, cube_spec16, I3):
    p = probes.Parametrix(I3)
    probe = probes.build_probe(p, cube_spec16, tagged_cube16, 0.25)
    f = probe.trace_f_delta
    assert f.support_tag == "GAMMA0"
    f.check_support(tagged_cube16)
    assert np.allclose(probe.y_delta, [0.5, 0.5, 1.25])
    x = tagged_cube16.vertices[tagged_cube16.boundary_vertices]
    core = np.linalg.norm(x - cube_spec16.anchor_x0, axis=1) <= 0.15
    assert np.allclose(f.nodal_values[core], probe.parametrix_values_on_gamma[core])
    assert np.all((probe.eta_cutoff >= 0) & (probe.eta_cutoff <= 1))


def test_resolution_gate(tagged_cube16, cube_spec16, I3):
    with pytest.raises(GateError, match="probe-resolution"):
        probes.build_probe(probes.Parametrix(I3), cube_spec16, tagged_cube16, 3 * tagged_cube16.spacing)


def test_cutoff_inner_radius_bounds(tagged_cube16, cube_spec16):
    with pytest.raises(ValueError):
        probes.probe_cutoff(tagged_cube16, cube_spec16, 0.05)
    with pytest.raises(ValueError):
        probes.probe_cutoff(tagged_cube16, cube_spec16, 0.3)
    eta = probes.probe_cutoff(tagged_cube16, cube_spec16, 0.075)
    assert eta.max() == 1.0


def test_normalization_integral_sigma_scaling(tagged_cube16, I3):
    # H for sigma A equals H for A divided by sigma (n = 3)
    p = probes.Parametrix(I3)
    y = np.array([0.5, 0.5, 1.25])
    K11 = probes.normalization_integral(p, p, tagged_cube16, y)
    K12 = probes.normalization_integral(p, p.with_sigma(2.0), tagged_cube16, y)
    assert K11 > 0
    assert K12 == pytest.approx(K11 / 2, rel=1e-12)


def test_normalization_integral_grows_as_probe_approaches(tagged_cube16, I3):
    p = probes.Parametrix(I3)
    Ks = [probes.normalization_integral(p, p, tagged_cube16, [0.5, 0.5, 1 + d]) for d in (0.5, 0.25, 0.125)]
    assert Ks[0] < Ks[1] < Ks[2]


def test_remainder_diagnostic_reports(tagged_cube16, cube_spec16, I3):
    probe = probes.build_probe(probes.Parametrix(I3), cube_spec16, tagged_cube16, 0.5)
    rep = probes.remainder_diagnostic(tagged_cube16, probe)
    assert rep.ell_n == 1.0 and rep.ratio == rep.z_h1
    assert rep.z_h1 > 0 and rep.w_h1 > 0 and rep.side == "divergence"
    full = probes.remainder_diagnostic(tagged_cube16, probe, full_boundary=True)
    # with the exact trace of a harmonic H only discretization error remains
    assert full.full_boundary and full.z_h1 < 0.1 * rep.z_h1
