# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.
"""
Fixed simplicial background mesh of the unit square, Lagrange node numbering and time slabs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from stfem.basis import lagrange_triangle

__all__ = [
    "BackgroundMesh",
    "TimePartition",
    "LagrangeNodes",
    "build_structured_mesh",
    "build_mesh",
    "build_facet_patches",
    "build_lagrange_nodes",
    "dump_mesh",
]

# Lagrange node coordinates are identified through integer keys at this resolution
NODE_KEY_SCALE = float(2**32)

_LOCAL_EDGES = np.array([[0, 1], [1, 2], [2, 0]])


@dataclass(frozen=True, eq=False)
class BackgroundMesh:
    """
    A conforming triangulation.

    facet_elements holds the (up to) two elements adjacent to each facet; -1 marks the missing
    neighbour of a boundary facet. element_facets[e, l] is the edge from local vertex l to
    local vertex (l + 1) % 3.
    """

    vertices: np.ndarray
    elements: np.ndarray
    facets: np.ndarray
    facet_elements: np.ndarray
    element_facets: np.ndarray
    h: float

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def n_facets(self) -> int:
        return len(self.facets)

    @cached_property
    def x0(self) -> np.ndarray:
        """First vertex of every element, the origin of its affine map"""
        return self.vertices[self.elements[:, 0]]

    @cached_property
    def B(self) -> np.ndarray:
        """Affine Jacobians: x = x0 + B @ xi"""
        v = self.vertices[self.elements]
        return np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]], axis=-1)

    @cached_property
    def Binv(self) -> np.ndarray:
        return np.linalg.inv(self.B)

    @cached_property
    def detB(self) -> np.ndarray:
        return np.linalg.det(self.B)

    @property
    def areas(self) -> np.ndarray:
        return 0.5 * self.detB

    @cached_property
    def interior_facets(self) -> np.ndarray:
        return np.flatnonzero(self.facet_elements[:, 1] >= 0)

    @cached_property
    def boundary_facets(self) -> np.ndarray:
        return np.flatnonzero(self.facet_elements[:, 1] < 0)

    def to_reference(self, elements: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Pull physical points x (m, 2) back through the affine maps of elements (m,)."""
        return np.einsum("mab,mb->ma", self.Binv[elements], x - self.x0[elements])

    def to_physical(self, elements: np.ndarray, xi: np.ndarray) -> np.ndarray:
        return self.x0[elements] + np.einsum("mab,mb->ma", self.B[elements], xi)


def build_mesh(vertices: np.ndarray, elements: np.ndarray) -> BackgroundMesh:
    """
    Derives the facet structure of a triangulation

    :param vertices: Vertex coordinates, shape (nv, 2)
    :param elements: Counter-clockwise vertex triples, shape (ne, 3)
    :return: The mesh
    """
    vertices = np.asarray(vertices, dtype=float)
    elements = np.asarray(elements, dtype=np.int64)
    v = vertices[elements]
    signed = (v[:, 1, 0] - v[:, 0, 0]) * (v[:, 2, 1] - v[:, 0, 1]) - (v[:, 2, 0] - v[:, 0, 0]) * (
        v[:, 1, 1] - v[:, 0, 1]
    )
    if np.any(signed <= 0.0):
        raise ValueError("Elements must have strictly positive signed area")

    edges = np.sort(elements[:, _LOCAL_EDGES], axis=2).reshape(-1, 2)
    facets, inverse = np.unique(edges, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)

    order = np.argsort(inverse, kind="stable")
    owners = order // 3
    sorted_facets = inverse[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = sorted_facets[1:] != sorted_facets[:-1]
    if np.any(np.bincount(inverse) > 2):
        raise ValueError("Non-conforming mesh: a facet is shared by more than two elements")

    facet_elements = np.full((len(facets), 2), -1, dtype=np.int64)
    facet_elements[sorted_facets[first], 0] = owners[first]
    facet_elements[sorted_facets[~first], 1] = owners[~first]

    lengths = np.linalg.norm(vertices[facets[:, 1]] - vertices[facets[:, 0]], axis=1)
    return BackgroundMesh(
        vertices=vertices,
        elements=elements,
        facets=facets,
        facet_elements=facet_elements,
        element_facets=inverse.reshape(-1, 3),
        h=float(lengths.max()),
    )


def build_structured_mesh(h_target: float) -> BackgroundMesh:
    """
    Structured triangulation of [0, 1]^2: n x n squares, every square split along the same
    (lower-left to upper-right) diagonal.

    :param h_target: Target mesh width; n = ceil(1 / h_target)
    :return: The mesh; its h is the longest edge, sqrt(2) / n
    """
    if not h_target > 0.0:
        raise ValueError(f"h_target must be positive, got {h_target}")
    n = max(1, math.ceil(1.0 / h_target - 1e-9))
    ticks = np.arange(n + 1) / n
    xx, yy = np.meshgrid(ticks, ticks)
    vertices = np.column_stack([xx.ravel(), yy.ravel()])

    ii, jj = np.meshgrid(np.arange(n), np.arange(n))
    a = (jj * (n + 1) + ii).ravel()
    b = a + 1
    c = a + n + 2
    d = a + n + 1
    elements = np.empty((2 * n * n, 3), dtype=np.int64)
    elements[0::2] = np.column_stack([a, b, c])
    elements[1::2] = np.column_stack([a, c, d])
    return build_mesh(vertices, elements)


def build_facet_patches(mesh: BackgroundMesh) -> list[tuple[int, tuple[int, int]]]:
    """:return: (facet, (element, element)) for every interior facet; boundary facets carry no patch"""
    return [(int(f), (int(mesh.facet_elements[f, 0]), int(mesh.facet_elements[f, 1]))) for f in mesh.interior_facets]


@dataclass(frozen=True, eq=False)
class LagrangeNodes:
    """Global numbering of the continuous P^order nodes, lexicographic in (x, y)."""

    order: int
    coords: np.ndarray
    element_nodes: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.coords)


def build_lagrange_nodes(mesh: BackgroundMesh, order: int) -> LagrangeNodes:
    ref = lagrange_triangle(order).nodes
    points = (mesh.x0[:, None, :] + np.einsum("eab,qb->eqa", mesh.B, ref)).reshape(-1, 2)
    keys = np.rint(points * NODE_KEY_SCALE).astype(np.int64)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    coords = np.zeros((inverse.max() + 1, 2))
    coords[inverse] = points
    return LagrangeNodes(order=order, coords=coords, element_nodes=inverse.reshape(mesh.n_elements, -1))


@dataclass(frozen=True)
class TimePartition:
    """Uniform slabs I_n = [t_{n-1}, t_n], n = 1..n_slabs, of [0, t_final]."""

    t_final: float
    n_slabs: int

    def __post_init__(self):
        if self.n_slabs < 1 or not self.t_final > 0.0:
            raise ValueError(f"Invalid partition: T={self.t_final}, N={self.n_slabs}")

    @classmethod
    def from_step(cls, t_final: float, dt: float) -> TimePartition:
        n = round(t_final / dt)
        if n < 1 or abs(n * dt - t_final) > 1e-12 * max(1.0, t_final):
            raise ValueError(f"Step {dt} does not divide {t_final}")
        return cls(t_final, n)

    @property
    def dt(self) -> float:
        return self.t_final / self.n_slabs

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.t_final, self.n_slabs + 1)

    def interval(self, n: int) -> tuple[float, float]:
        """:param n: Slab number, 1-based"""
        if not 1 <= n <= self.n_slabs:
            raise IndexError(f"Slab {n} not in 1..{self.n_slabs}")
        nodes = self.nodes
        return float(nodes[n - 1]), float(nodes[n])


def dump_mesh(mesh: BackgroundMesh, path: Path) -> None:
    """Plain-text vertex and element lists, for debugging."""
    with path.open("wt", encoding="utf-8") as fout:
        print(f"vertices {mesh.n_vertices}", file=fout)
        for x, y in mesh.vertices:
            print(f"{x!r} {y!r}", file=fout)
        print(f"elements {mesh.n_elements}", file=fout)
        for a, b, c in mesh.elements:
            print(f"{a} {b} {c}", file=fout)
