import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad
from scipy.special import ellipe

from plasmoheat.geometry import (InvalidGeometryError, build_circle, build_ellipse, discretize,
                                 mesh_interior)


def test_circle_perimeter_exact():
    mesh = discretize([build_circle(1.0)], 64)
    assert abs(mesh.weights.sum() - 2 * np.pi) <= 1e-12


def test_ellipse_perimeter_matches_elliptic_integral():
    a, b = 3.0, 2.0
    mesh = discretize([build_ellipse(a, b)], 256)
    exact = 4 * a * ellipe(1 - (b / a) ** 2)
    adaptive, _ = quad(lambda t: np.hypot(a * np.sin(t), b * np.cos(t)), 0, 2 * np.pi,
                       epsabs=1e-13, epsrel=1e-13, limit=200)
    assert abs(exact - adaptive) < 1e-11
    assert abs(mesh.weights.sum() - exact) <= 1e-10


def test_nanometre_ellipse_shape():
    c = build_ellipse(30e-9, 20e-9)
    mesh = discretize([c], 64)
    assert np.allclose(np.abs(mesh.nodes).max(0), [30e-9, 20e-9], rtol=1e-12)


def test_pair_components_and_flux_identity():
    c1 = build_ellipse(0.03, 0.02)
    c2 = build_ellipse(0.03, 0.02, center=(0.0, 0.0401))
    mesh = discretize([c1, c2], 128)
    assert set(np.unique(mesh.component)) == {0, 1}
    for s in mesh.slices():
        flux = (mesh.weights[s, None] * mesh.normals[s]).sum(0)
        assert np.abs(flux).max() <= 1e-14
    gap = np.min(np.linalg.norm(mesh.nodes[mesh.component == 0][:, None]
                                - mesh.nodes[mesh.component == 1][None], axis=-1))
    assert gap == pytest.approx(1e-4, rel=0.05)


def test_normals_outward_and_unit():
    mesh = discretize([build_ellipse(3.0, 2.0, center=(1.0, -2.0), rotation=0.4)], 64)
    assert np.allclose(np.linalg.norm(mesh.normals, axis=1), 1.0)
    assert np.all(((mesh.nodes - [1.0, -2.0]) * mesh.normals).sum(1) > 0)


def test_curvature_of_circle():
    mesh = discretize([build_circle(2.0)], 32)
    assert np.allclose(mesh.curvature, 0.5, atol=1e-13)


@pytest.mark.parametrize("a,b", [(0.0, 1.0), (1.0, -1.0)])
def test_nonpositive_axes_rejected(a, b):
    with pytest.raises(InvalidGeometryError):
        build_ellipse(a, b)


def test_overlap_and_node_count_rejected():
    c = build_circle(1.0)
    with pytest.raises(InvalidGeometryError):
        discretize([c, build_circle(1.0, (0.5, 0.0))], 64)
    with pytest.raises(InvalidGeometryError):
        discretize([c], 15)
    with pytest.raises(InvalidGeometryError):
        discretize([c], 8)


def test_unit_disk_interior_area():
    im = mesh_interior(build_circle(1.0), 0.1)
    assert np.pi * 0.99 <= im.area <= np.pi * 1.01
    pts, w = im.quadrature()
    assert abs(w.sum() - np.pi) <= 1e-10
    assert np.all(np.hypot(*im.centroids.T) < 1.0)


def test_ellipse_interior_quadrature_moments():
    im = mesh_interior(build_ellipse(3.0, 2.0), 0.2)
    pts, w = im.quadrature()
    assert abs(w.sum() - 6 * np.pi) <= 1e-9
    # int x^2 over the ellipse is pi a^3 b / 4
    assert abs(w @ pts[:, 0] ** 2 - np.pi * 27 * 2 / 4) <= 1e-9


def test_interior_h_too_large():
    with pytest.raises(InvalidGeometryError):
        mesh_interior(build_ellipse(3.0, 2.0), 5.0)


def test_graded_curve_same_shape_denser_nodes():
    c = build_ellipse(1.0, 0.5)
    g = c.graded(np.pi / 2, 0.9)
    m0, m1 = discretize([c], 128), discretize([g], 128)
    assert abs(m0.weights.sum() - m1.weights.sum()) <= 1e-10
    x, y = m1.nodes.T
    assert np.allclose(x**2 + (y / 0.5) ** 2, 1.0, atol=1e-12)
    assert m1.weights.min() < 0.2 * m0.weights.min()
    with pytest.raises(InvalidGeometryError):
        c.graded(0.0, 1.0)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.1, 10.0), st.floats(0.1, 10.0), st.floats(-3.0, 3.0))
def test_flux_identity_property(a, b, rot):
    mesh = discretize([build_ellipse(a, b, rotation=rot)], 64)
    flux = (mesh.weights[:, None] * mesh.normals).sum(0)
    assert np.abs(flux).max() <= 1e-12 * mesh.weights.sum()


@settings(max_examples=20, deadline=None)
@given(st.floats(1e-9, 1e3))
def test_affine_scaling_property(scale):
    c = build_ellipse(3.0, 2.0)
    m0 = discretize([c], 64)
    m1 = discretize([c.affine((1.0, 2.0), scale)], 64)
    assert np.allclose(m1.weights, scale * m0.weights, rtol=1e-12)
    assert np.allclose(m1.normals, m0.normals, atol=1e-12)
