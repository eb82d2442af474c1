# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.
"""
Polynomial building blocks shared by the geometry, the quadrature and the FE spaces.

All rules and bases live on reference domains: the unit interval [0, 1] for time and the unit
triangle with vertices (0, 0), (1, 0), (0, 1) for space.
"""
from __future__ import annotations

import functools
import math

import numpy as np

__all__ = [
    "REF_VERTICES",
    "gauss_legendre",
    "gauss_lobatto_nodes",
    "segment_points",
    "triangle_rule",
    "LagrangeInterval",
    "LagrangeTriangle",
    "lobatto_basis",
    "lagrange_triangle",
]

REF_VERTICES = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
REF_VERTICES.setflags(write=False)


def _frozen(*arrays: np.ndarray) -> tuple[np.ndarray, ...]:
    for a in arrays:
        a.setflags(write=False)
    return arrays


@functools.lru_cache(maxsize=None)
def gauss_legendre(npoints: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Gauss–Legendre rule on [0, 1]

    :param npoints: Number of points; the rule is exact for polynomials of degree 2*npoints - 1
    :return: (nodes, weights), both read-only
    """
    if npoints < 1:
        raise ValueError(f"Need at least one point, got {npoints}")
    x, w = np.polynomial.legendre.leggauss(npoints)
    return _frozen(0.5 * (x + 1.0), 0.5 * w)


@functools.lru_cache(maxsize=None)
def gauss_lobatto_nodes(npoints: int) -> np.ndarray:
    """
    Gauss–Lobatto nodes on [0, 1], endpoints included.

    A single node degenerates to the midpoint, which is what a piecewise constant in time uses.
    """
    if npoints < 1:
        raise ValueError(f"Need at least one node, got {npoints}")
    if npoints == 1:
        return _frozen(np.array([0.5]))[0]
    interior = np.polynomial.legendre.Legendre.basis(npoints - 1).deriv().roots()
    x = np.concatenate(([-1.0], np.sort(np.real(interior)), [1.0]))
    return _frozen(0.5 * (x + 1.0))[0]


def segment_points(degree: int) -> int:
    """Number of Gauss points integrating polynomials of the given degree on a segment."""
    return max(1, math.ceil((degree + 1) / 2))


@functools.lru_cache(maxsize=None)
def triangle_rule(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Collapsed (conical product) Gauss rule on the reference triangle.

    All points are interior and all weights are positive; the weights sum to 1/2.

    :param degree: Polynomial degree integrated exactly
    :return: (points (m, 2), weights (m,))
    """
    n = max(1, math.ceil((degree + 2) / 2))
    x, w = gauss_legendre(n)
    u, v = np.meshgrid(x, x, indexing="ij")
    wu, wv = np.meshgrid(w, w, indexing="ij")
    points = np.column_stack([u.ravel(), (v * (1.0 - u)).ravel()])
    weights = (wu * wv * (1.0 - u)).ravel()
    return _frozen(points, weights)


def _powers(x: np.ndarray, exponents: np.ndarray, deriv: bool) -> np.ndarray:
    if not deriv:
        return x[:, None] ** exponents
    return exponents * x[:, None] ** np.clip(exponents - 1, 0, None)


class LagrangeInterval:
    """Lagrange basis on [0, 1] through the given nodes."""

    def __init__(self, nodes: np.ndarray):
        self.nodes = np.asarray(nodes, dtype=float)
        self.size = len(self.nodes)
        self._exponents = np.arange(self.size)
        self._coeffs = np.linalg.inv(_powers(self.nodes, self._exponents, False))

    def eval(self, tau) -> np.ndarray:
        """:return: basis values, shape (len(tau), size)"""
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        return _powers(tau, self._exponents, False) @ self._coeffs

    def deriv(self, tau) -> np.ndarray:
        """:return: first derivatives, shape (len(tau), size)"""
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        return _powers(tau, self._exponents, True) @ self._coeffs

    def mass(self) -> np.ndarray:
        """:return: the matrix of integrals of products of basis functions over [0, 1]"""
        x, w = gauss_legendre(self.size)
        vals = self.eval(x)
        return np.einsum("q,qa,qb->ab", w, vals, vals)


@functools.lru_cache(maxsize=None)
def lobatto_basis(npoints: int) -> LagrangeInterval:
    return LagrangeInterval(gauss_lobatto_nodes(npoints))


class LagrangeTriangle:
    """
    Nodal P^k basis on the reference triangle.

    Nodes are the equispaced barycentric lattice, ordered row by row (increasing second
    coordinate), so that for k = 1 the nodes coincide with REF_VERTICES.
    """

    def __init__(self, order: int):
        if order < 1:
            raise ValueError(f"Order must be positive, got {order}")
        self.order = order
        self.nodes = np.array(
            [(i / order, j / order) for j in range(order + 1) for i in range(order + 1 - j)], dtype=float
        )
        self.size = len(self.nodes)
        self._exponents = np.array(
            [(total - b, b) for total in range(order + 1) for b in range(total + 1)], dtype=float
        )
        self._coeffs = np.linalg.inv(self._monomials(self.nodes))

    def _monomials(self, xi: np.ndarray) -> np.ndarray:
        a, b = self._exponents[:, 0], self._exponents[:, 1]
        return xi[:, 0:1] ** a * xi[:, 1:2] ** b

    def eval(self, xi: np.ndarray) -> np.ndarray:
        """:return: basis values at points xi (m, 2), shape (m, size)"""
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        return self._monomials(xi) @ self._coeffs

    def grad(self, xi: np.ndarray) -> np.ndarray:
        """:return: reference gradients at points xi (m, 2), shape (m, size, 2)"""
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        a, b = self._exponents[:, 0], self._exponents[:, 1]
        x, y = xi[:, 0:1], xi[:, 1:2]
        dx = a * x ** np.clip(a - 1, 0, None) * y**b
        dy = b * x**a * y ** np.clip(b - 1, 0, None)
        return np.stack([dx @ self._coeffs, dy @ self._coeffs], axis=-1)


@functools.lru_cache(maxsize=None)
def lagrange_triangle(order: int) -> LagrangeTriangle:
    return LagrangeTriangle(order)
