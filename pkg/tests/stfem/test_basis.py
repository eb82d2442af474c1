import math
from typing import Iterable

import numpy as np
import pytest
from _pytest.mark import ParameterSet

from stfem.basis import (
    REF_VERTICES,
    gauss_legendre,
    gauss_lobatto_nodes,
    lagrange_triangle,
    lobatto_basis,
    segment_points,
    triangle_rule,
)


@pytest.mark.parametrize("npoints", [1, 2, 3, 5])
def test_gauss_legendre_exactness(npoints: int):
    x, w = gauss_legendre(npoints)
    assert w.sum() == pytest.approx(1.0, abs=1e-14)
    for p in range(2 * npoints):
        assert np.dot(w, x**p) == pytest.approx(1.0 / (p + 1), abs=1e-14)


def test_gauss_legendre_rejects_zero():
    with pytest.raises(ValueError):
        gauss_legendre(0)


lobatto_vals: Iterable[ParameterSet] = [
    pytest.param(1, [0.5], id="midpoint"),
    pytest.param(2, [0.0, 1.0], id="endpoints"),
    pytest.param(3, [0.0, 0.5, 1.0], id="three"),
    pytest.param(4, [0.0, 0.5 - math.sqrt(5) / 10, 0.5 + math.sqrt(5) / 10, 1.0], id="four"),
]


@pytest.mark.parametrize("npoints, expekt", lobatto_vals)
def test_gauss_lobatto_nodes(npoints: int, expekt: list[float]):
    assert gauss_lobatto_nodes(npoints) == pytest.approx(expekt, abs=1e-14)


@pytest.mark.parametrize("degree, expekt", [(0, 1), (1, 1), (2, 2), (3, 2), (6, 4)])
def test_segment_points(degree: int, expekt: int):
    assert segment_points(degree) == expekt


@pytest.mark.parametrize("degree", [1, 2, 4, 6, 10])
def test_triangle_rule_exactness(degree: int):
    points, weights = triangle_rule(degree)
    assert np.all(weights > 0.0)
    assert weights.sum() == pytest.approx(0.5, abs=1e-14)
    for total in range(degree + 1):
        for a in range(total + 1):
            b = total - a
            exact = math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)
            got = np.dot(weights, points[:, 0] ** a * points[:, 1] ** b)
            assert got == pytest.approx(exact, abs=1e-14)


@pytest.mark.parametrize("npoints", [1, 2, 3, 4])
def test_lobatto_basis_kronecker(npoints: int):
    basis = lobatto_basis(npoints)
    assert basis.eval(basis.nodes) == pytest.approx(np.eye(npoints), abs=1e-12)
    tau = np.linspace(0.0, 1.0, 7)
    assert basis.eval(tau).sum(axis=1) == pytest.approx(np.ones(7), abs=1e-12)
    assert basis.deriv(tau).sum(axis=1) == pytest.approx(np.zeros(7), abs=1e-11)


def test_lobatto_mass_linear():
    assert lobatto_basis(2).mass() == pytest.approx(np.array([[1 / 3, 1 / 6], [1 / 6, 1 / 3]]), abs=1e-14)


@pytest.mark.parametrize("order, size", [(1, 3), (2, 6), (3, 10), (4, 15)])
def test_lagrange_triangle(order: int, size: int):
    tri = lagrange_triangle(order)
    assert tri.size == size
    assert tri.eval(tri.nodes) == pytest.approx(np.eye(size), abs=1e-10)
    xi = np.array([[0.2, 0.3], [0.6, 0.1], [0.0, 0.0]])
    assert tri.eval(xi).sum(axis=1) == pytest.approx(np.ones(3), abs=1e-12)
    assert tri.grad(xi).sum(axis=1) == pytest.approx(np.zeros((3, 2)), abs=1e-10)


def test_linear_triangle_nodes_are_vertices():
    assert lagrange_triangle(1).nodes == pytest.approx(REF_VERTICES)


def test_lagrange_triangle_reproduces_quadratics():
    tri = lagrange_triangle(2)
    coeffs = tri.nodes[:, 0] ** 2 - 3 * tri.nodes[:, 0] * tri.nodes[:, 1] + 2
    xi = np.array([[0.1, 0.7], [0.33, 0.33]])
    exact = xi[:, 0] ** 2 - 3 * xi[:, 0] * xi[:, 1] + 2
    assert tri.eval(xi) @ coeffs == pytest.approx(exact, abs=1e-12)
    grad = np.einsum("mia,i->ma", tri.grad(xi), coeffs)
    assert grad == pytest.approx(np.column_stack([2 * xi[:, 0] - 3 * xi[:, 1], -3 * xi[:, 0]]), abs=1e-12)


def test_lagrange_triangle_rejects_zero_order():
    with pytest.raises(ValueError):
        lagrange_triangle(0)
