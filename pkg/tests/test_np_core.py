import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from plasmoheat.geometry import build_circle, build_ellipse, discretize
from plasmoheat.np_core import (DensityField, LaplaceLayers, NearSingularWarning, assemble_K,
                                assemble_Kstar, assemble_S, build_Stilde, calderon_residual,
                                compute_phi0, decomposition_json, dnu_from_interior,
                                export_operator_csv, hstar_inner, project_H0, project_off_half,
                                resolvent_apply)


def _random_density(rng, n):
    return rng.standard_normal(n)


# --- single layer -----------------------------------------------------------

def test_S_unit_circle_uniform_density_vanishes():
    mesh = discretize([build_circle(1.0)], 64)
    S = assemble_S(mesh)
    assert np.abs(S @ np.full(mesh.n, 1 / (2 * np.pi))).max() <= 1e-13


def test_S_radius_two_uniform_density():
    mesh = discretize([build_circle(2.0)], 64)
    phi = np.full(mesh.n, 1 / (4 * np.pi))
    assert np.allclose(assemble_S(mesh) @ phi, np.log(2) / (2 * np.pi), atol=1e-13)


def test_S_matches_adaptive_quadrature_on_ellipse():
    from scipy.integrate import quad
    c = build_ellipse(3.0, 2.0)
    mesh = discretize([c], 128)
    f = lambda t: 1 + np.cos(t) + 0.5 * np.sin(2 * t)
    S = assemble_S(mesh)
    i = 17
    x = mesh.nodes[i]

    def integrand(t):
        y = c.point(np.array([t]))[0]
        sp = np.hypot(*c.deriv(np.array([t]))[0])
        return np.log(np.hypot(*(x - y))) / (2 * np.pi) * f(t) * sp

    t0 = mesh.theta[i]
    ref = sum(quad(integrand, lo, hi, points=[t0], limit=400, epsabs=1e-13)[0]
              for lo, hi in [(t0 - np.pi, t0), (t0, t0 + np.pi)])
    assert abs((S @ f(mesh.theta))[i] - ref) <= 1e-10


def test_S_weighted_symmetry(ellipse_layers):
    L = ellipse_layers
    S = np.asarray(L.S)
    # S W^{-1} is the symmetric kernel matrix
    A = S / L.mesh.weights[None, :]
    assert np.linalg.norm(A - A.T) / np.linalg.norm(A) <= 1e-12


# --- double layers -------------------------------------------------------------

def test_Kstar_circle_is_rank_one():
    R = 1.7
    mesh = discretize([build_circle(R)], 64)
    Ks = np.asarray(assemble_Kstar(mesh))
    expected = np.outer(np.ones(mesh.n), mesh.weights) / (4 * np.pi * R)
    assert np.abs(Ks - expected).max() <= 1e-14


def test_K_gauss_identity_ellipse(ellipse_layers):
    K = np.asarray(ellipse_layers.K)
    assert np.abs(K @ np.ones(K.shape[0]) - 0.5).max() <= 1e-12


def test_K_is_weighted_adjoint(ellipse_layers):
    L = ellipse_layers
    W = np.diag(L.mesh.weights)
    lhs = W @ np.asarray(L.K)
    rhs = np.asarray(L.Kstar).T @ W
    assert np.abs(lhs - rhs).max() <= 1e-14


def test_two_component_spectrum_bounds():
    mesh = discretize([build_ellipse(1.0, 0.6), build_ellipse(0.8, 0.8, center=(2.5, 0.3))], 96)
    ev = LaplaceLayers.build(mesh).decomp.eigenvalues
    assert ev.max() <= 0.5 + 1e-6 and ev.min() > -0.5 - 1e-6
    assert np.sum(np.abs(ev - 0.5) < 1e-6) == 2


# --- phi0 ---------------------------------------------------------------------

def test_phi0_unit_circle():
    mesh = discretize([build_circle(1.0)], 64)
    phi0 = compute_phi0(mesh)
    assert np.abs(phi0.values - 1 / (2 * np.pi)).max() <= 1e-10


def test_phi0_circle_radius_metadata():
    R = 0.3
    mesh = discretize([build_circle(R)], 64)
    phi0 = compute_phi0(mesh)
    assert np.abs(phi0.values - 1 / (2 * np.pi * R)).max() <= 1e-10
    assert phi0.meta["a"] == pytest.approx(-np.log(R) / (2 * np.pi), abs=1e-12)


def test_phi0_two_circles_positive_and_normalised():
    mesh = discretize([build_circle(1.0), build_circle(0.5, (4.0, 0.0))], 64)
    phi0 = compute_phi0(mesh)
    assert abs(mesh.weights @ phi0.values - 1) <= 1e-12
    assert np.all(phi0.values > 0)
    # equilibrium: S[phi0] is one constant on both components
    s = assemble_S(mesh) @ phi0.values
    assert np.ptp(s) <= 1e-10


# --- S tilde and H* ------------------------------------------------------------

def test_Stilde_definition_cases(ellipse128, rng):
    L = ellipse128
    w = L.mesh.weights
    phi = _random_density(rng, L.mesh.n)
    phi -= (w @ phi) / w.sum()
    assert np.allclose(L.Stilde @ phi, L.S @ phi, atol=1e-14)
    assert np.allclose(L.Stilde @ L.phi0.values, -1.0, atol=1e-12)


def test_Stilde_negative(ellipse128, rng):
    L = ellipse128
    w = L.mesh.weights
    for _ in range(100):
        phi = _random_density(rng, L.mesh.n)
        assert w @ (phi * (L.Stilde @ phi)) < 0


def test_hstar_phi0_norm_and_positivity(ellipse128, rng):
    L = ellipse128
    assert hstar_inner(L.phi0, L.phi0, L.Stilde) == pytest.approx(1.0, abs=1e-12)
    for _ in range(20):
        phi = _random_density(rng, L.mesh.n)
        assert hstar_inner(phi, phi, L.Stilde, L.mesh.weights).real > 0


def test_hstar_sesquilinear(ellipse128, rng):
    L = ellipse128
    u = rng.standard_normal(L.mesh.n) + 1j * rng.standard_normal(L.mesh.n)
    v = rng.standard_normal(L.mesh.n) + 1j * rng.standard_normal(L.mesh.n)
    w = L.mesh.weights
    a = 0.3 - 1.2j
    assert hstar_inner(u, a * v, L.Stilde, w) == pytest.approx(np.conj(a) * hstar_inner(u, v, L.Stilde, w))
    assert hstar_inner(a * u, v, L.Stilde, w) == pytest.approx(a * hstar_inner(u, v, L.Stilde, w))


def test_hstar_mesh_mismatch(ellipse128, circle_layers):
    with pytest.raises(ValueError):
        hstar_inner(DensityField(np.ones(64), circle_layers.mesh), ellipse128.phi0, ellipse128.Stilde)


def test_hstar_norm_under_dilation(rng):
    B = build_ellipse(1.0, 2.0 / 3.0)
    delta, z = 3e-8, np.array([1e-7, -2e-7])
    mB = discretize([B], 96)
    mD = discretize([B.affine(z, delta)], 96)
    LB, LD = LaplaceLayers.build(mB), LaplaceLayers.build(mD)
    phi = rng.standard_normal(96)
    nD = np.sqrt(hstar_inner(phi, phi, LD.Stilde, mD.weights).real)
    nB = np.sqrt(hstar_inner(phi, phi, LB.Stilde, mB.weights).real)
    assert nD == pytest.approx(delta * nB, rel=1e-10)


def test_rescaling_identity_single_layer(rng):
    B = build_ellipse(1.0, 2.0 / 3.0)
    delta = 0.01
    mB = discretize([B], 96)
    mD = discretize([B.affine((0.2, 0.1), delta)], 96)
    phi = rng.standard_normal(96)
    lhs = assemble_S(mD) @ phi
    rhs = delta * (assemble_S(mB) @ phi) + delta * np.log(delta) / (2 * np.pi) * (mB.weights @ phi)
    assert np.abs(lhs - rhs).max() <= 1e-10 * np.abs(lhs).max()


# --- spectrum ----------------------------------------------------------------

def test_ellipse_spectrum_analytic(ellipse_layers):
    ev = ellipse_layers.decomp.eigenvalues
    assert ev[0] == pytest.approx(0.5, abs=1e-12)
    for k in range(1, 6):
        for sgn in (1, -1):
            assert np.abs(ev - sgn * 0.5 * 0.2**k).min() <= 1e-3


def test_circle_spectrum(circle_layers):
    ev = circle_layers.decomp.eigenvalues
    assert ev[0] == pytest.approx(0.5, abs=1e-12)
    assert np.abs(ev[1:]).max() <= 1e-12


def test_spectrum_scale_invariance():
    e1 = LaplaceLayers.build(discretize([build_ellipse(3.0, 2.0)], 128)).decomp.eigenvalues
    e2 = LaplaceLayers.build(discretize([build_ellipse(30e-9, 20e-9)], 128)).decomp.eigenvalues
    assert np.abs(np.sort(e1) - np.sort(e2)).max() <= 1e-8


def test_gram_certificate_and_ordering(ellipse_layers):
    d = ellipse_layers.decomp
    assert d.gram_residual <= 1e-8
    assert np.all(np.diff(np.abs(d.eigenvalues[1:])) <= 1e-12)


def test_hstar_self_adjointness(ellipse128, rng):
    L = ellipse128
    w = L.mesh.weights
    Ks = np.asarray(L.Kstar)
    for _ in range(5):
        u, v = rng.standard_normal(L.mesh.n), rng.standard_normal(L.mesh.n)
        lhs = hstar_inner(Ks @ u, v, L.Stilde, w)
        rhs = hstar_inner(u, Ks @ v, L.Stilde, w)
        nu = np.sqrt(hstar_inner(u, u, L.Stilde, w).real)
        nv = np.sqrt(hstar_inner(v, v, L.Stilde, w).real)
        assert abs(lhs - rhs) <= 1e-8 * nu * nv


def test_calderon_identity(ellipse_layers):
    L = ellipse_layers
    assert calderon_residual(L.Stilde, L.Kstar, L.K) <= 1e-8


def test_normal_components_zero_mean(ellipse_layers):
    m = ellipse_layers.mesh
    assert np.abs(m.weights @ m.normals).max() <= 1e-10


# --- resolvent and projections ---------------------------------------------------

def test_resolvent_single_mode(ellipse128):
    d = ellipse128.decomp
    phi1 = d.eigenvectors[:, 1]
    out = resolvent_apply(d, 2.0, phi1)
    assert np.allclose(out, phi1 / (2 - d.eigenvalues[1]), atol=1e-10)


def test_resolvent_phi0(ellipse128):
    d = ellipse128.decomp
    lam = 0.1 + 0.2j
    out = resolvent_apply(d, lam, d.phi0)
    assert np.allclose(out, d.phi0 / (lam - 0.5), atol=1e-10)


def test_resolvent_matches_dense_solve():
    L = LaplaceLayers.build(discretize([build_ellipse(3.0, 2.0)], 128))
    lam = 0.3 + 0.001j
    rhs = L.mesh.normals[:, 0] + 0.3 * L.mesh.nodes[:, 1]
    ref = np.linalg.solve(lam * np.eye(L.mesh.n) - np.asarray(L.Kstar), rhs)
    out = resolvent_apply(L.decomp, lam, rhs)
    assert np.linalg.norm(out - ref) <= 1e-8 * np.linalg.norm(ref)


def test_resolvent_near_singular_warns(ellipse128):
    d = ellipse128.decomp
    with pytest.warns(NearSingularWarning):
        resolvent_apply(d, d.eigenvalues[3] + 1e-14, d.eigenvectors[:, 3])


def test_resolvent_of_normal_ignores_half(ellipse128):
    # the normal field does not load the 1/2 eigenspace, so lam = 1/2 stays quiet
    import warnings
    d, m = ellipse128.decomp, ellipse128.mesh
    with warnings.catch_warnings():
        warnings.simplefilter("error", NearSingularWarning)
        resolvent_apply(d, 0.5, m.normals[:, 0], coupling_tol=1e-9)


def test_project_H0_cases(ellipse128, rng):
    d, w = ellipse128.decomp, ellipse128.mesh.weights
    assert np.abs(project_H0(d, d.phi0)).max() <= 1e-10
    phi = rng.standard_normal(w.size)
    phi -= (w @ phi) / w.sum()
    assert np.abs(project_H0(d, phi) - phi).max() <= 1e-12 * np.abs(phi).max()
    psi = rng.standard_normal(w.size)
    p1 = project_H0(d, psi)
    assert np.abs(project_H0(d, p1) - p1).max() <= 1e-12 * np.abs(p1).max()
    assert abs(d.inner(p1, d.phi0)) <= 1e-10


def test_project_off_half_single_component(ellipse128, rng):
    d = ellipse128.decomp
    psi = rng.standard_normal(d.n)
    assert np.allclose(project_off_half(d, psi), project_H0(d, psi), atol=1e-10)


# --- normal derivative from boundary data -----------------------------------------

def test_dnu_linear_function(ellipse_layers):
    L = ellipse_layers
    e = np.array([0.6, 0.8])
    g = L.mesh.nodes @ e
    out = dnu_from_interior(L.decomp, L.Stilde, g)
    assert np.abs(out - L.mesh.normals @ e).max() <= 1e-8


def test_dnu_constant(ellipse_layers):
    L = ellipse_layers
    out = dnu_from_interior(L.decomp, L.Stilde, np.full(L.mesh.n, 2.5))
    assert np.abs(out).max() <= 1e-10


def test_dnu_quadratic_harmonic_on_circle():
    L = LaplaceLayers.build(discretize([build_circle(1.3)], 64))
    x, y = L.mesh.nodes.T
    g = x**2 - y**2
    exact = 2 * x * L.mesh.normals[:, 0] - 2 * y * L.mesh.normals[:, 1]
    out = dnu_from_interior(L.decomp, L.Stilde, g)
    assert np.abs(out - exact).max() <= 1e-6


# --- export ------------------------------------------------------------------

def test_exports(tmp_path, circle_layers):
    p = tmp_path / "s.csv"
    export_operator_csv(circle_layers.S, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "# operator S n=64"
    M = np.loadtxt(p, delimiter=",", comments="#")
    assert np.array_equal(M, np.asarray(circle_layers.S))
    data = json.loads(decomposition_json(circle_layers.decomp, {"x": [1.0, 2.0]}))
    assert data["lambda"][0] == pytest.approx(0.5)
    assert data["coupling"]["x"] == [1.0, 2.0]


@settings(max_examples=15, deadline=None)
@given(st.floats(0.2, 5.0), st.floats(1 / 3, 3.0))
def test_spectrum_bounds_property(a, ratio):
    # aspect ratios up to 3 are resolved at 64 nodes
    ev = LaplaceLayers.build(discretize([build_ellipse(a, a * ratio)], 64)).decomp.eigenvalues
    assert ev.max() <= 0.5 + 1e-6 and ev.min() > -0.5 - 1e-6
    assert abs(ev[0] - 0.5) <= 1e-6


def test_K_matches_definition(circle_layers):
    K = np.asarray(assemble_K(circle_layers.mesh))
    assert np.allclose(K, np.asarray(circle_layers.Kstar), atol=1e-14)
