import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sthdg.fem_core import (AffineMap, element_jacobians, make_basis, make_quadrature,
                            n_triangle_dofs, physical_map, pressure_basis,
                            triangle_monomial_integral)
from sthdg.geometry import build_structured_mesh


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 12), st.integers(0, 12))
def test_triangle_rule_integrates_monomials(i, j):
    q = make_quadrature("triangle", max(i + j, 1))
    x, y = q.points.T
    assert np.sum(q.weights * x ** i * y ** j) == pytest.approx(
        triangle_monomial_integral(i, j), rel=1e-12, abs=1e-15)


def test_monomial_integral_closed_form():
    # int_T x^i y^j = i! j! / (i + j + 2)!
    assert triangle_monomial_integral(0, 0) == pytest.approx(0.5)
    assert triangle_monomial_integral(1, 0) == pytest.approx(1 / 6)
    assert triangle_monomial_integral(2, 1) == pytest.approx(2 / 120)


@pytest.mark.parametrize("kind", ["segment", "interval"])
@pytest.mark.parametrize("m", range(0, 15))
def test_line_rule_exactness(kind, m):
    q = make_quadrature(kind, max(m, 1))
    assert np.sum(q.weights * q.points[:, 0] ** m) == pytest.approx(1.0 / (m + 1), rel=1e-13)


def test_quadrature_weights_positive():
    for d in (1, 5, 20, 60):
        assert np.all(make_quadrature("triangle", d).weights > 0)


def test_quadrature_rejects_bad_input():
    with pytest.raises(ValueError):
        make_quadrature("quad", 3)
    with pytest.raises(ValueError):
        make_quadrature("triangle", 61)
    with pytest.raises(ValueError):
        make_quadrature("triangle", 0)


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_triangle_basis_orthonormal(k):
    b = make_basis("triangle", k)
    q = make_quadrature("triangle", 2 * k)
    phi = b.eval(q.points)
    assert phi.shape == (n_triangle_dofs(k), len(q))
    # reference area 1/2, so the Gram matrix in sum-of-weights scaling is the identity
    np.testing.assert_allclose(phi * q.weights @ phi.T, np.eye(b.dim), atol=1e-12)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_interval_basis_orthonormal(k):
    b = make_basis("interval", k)
    q = make_quadrature("interval", 2 * k)
    psi = b.eval(q.points)
    np.testing.assert_allclose(psi * q.weights @ psi.T, np.eye(k + 1), atol=1e-13)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_basis_gradient_matches_finite_differences(k):
    b = make_basis("triangle", k)
    x = np.array([[0.2, 0.3], [0.6, 0.1]])
    g = b.grad(x)
    eps = 1e-6
    for d in range(2):
        e = np.zeros(2)
        e[d] = eps
        fd = (b.eval(x + e) - b.eval(x - e)) / (2 * eps)
        np.testing.assert_allclose(g[:, :, d], fd, atol=1e-7)


def test_pressure_basis_degree():
    assert pressure_basis(1).dim == 1
    assert pressure_basis(3).dim == 6
    with pytest.raises(ValueError):
        make_basis("triangle", 0)


def test_affine_map_roundtrip():
    mesh = build_structured_mesh(2, 3)
    for K in (0, 5, 11):
        F = physical_map(mesh, K)
        ref = np.array([[0.1, 0.2], [0.7, 0.2], [0.0, 0.0]])
        np.testing.assert_allclose(F.inverse(F(ref)), ref, atol=1e-14)
        assert abs(F.det) == pytest.approx(2 * mesh.areas[K])


def test_element_jacobians_consistent_with_maps():
    mesh = build_structured_mesh(3, 2)
    origin, J, det, invT = element_jacobians(mesh)
    for K in range(mesh.n_elements):
        F = physical_map(mesh, K)
        np.testing.assert_allclose(J[K], F.jacobian)
        np.testing.assert_allclose(origin[K], F.origin)
        np.testing.assert_allclose(invT[K] @ J[K].T, np.eye(2), atol=1e-13)
    np.testing.assert_allclose(np.abs(det), 2 * mesh.areas)


def test_push_gradients_of_linear_function():
    F = physical_map(build_structured_mesh(2, 2, domain=(0, 2, 1, 2)), 3)
    assert isinstance(F, AffineMap)
    # f(x) = a . x pulled back has reference gradient J^T a
    a = np.array([0.3, -1.2])
    np.testing.assert_allclose(F.push_gradients(F.jacobian.T @ a), a, atol=1e-14)
