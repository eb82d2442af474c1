# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.
"""
Tensor-product space-time finite element spaces on the active elements of a slab.

A dof is a pair (spatial Lagrange node, temporal Gauss–Lobatto node). Spatial nodes are
numbered in the order of the global LagrangeNodes (lexicographic by coordinate), restricted to
nodes touching an active element; the time index runs fastest. Local dofs of an element are
ordered the same way: local index = i * (k_t + 1) + j for spatial node i and time node j.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

import numpy as np

from stfem.basis import lagrange_triangle, lobatto_basis
from stfem.isoparam import MappingEval, SlabDeformation, eval_mapping
from stfem.levelset import ActiveSets, EmptyActiveSet
from stfem.mesh import BackgroundMesh, LagrangeNodes, build_lagrange_nodes

__all__ = [
    "InactiveElement",
    "Component",
    "SpaceTimeSpace",
    "CoupledSpace",
    "MappedBasis",
    "DiscreteFunction",
    "build_space",
    "build_coupled_space",
    "eval_basis",
    "mapped_eval",
    "interpolate",
]


class InactiveElement(KeyError):
    """Raised when dofs are requested on an element the space does not live on"""

    pass


class Component(Enum):
    BULK = "bulk"
    SURFACE = "surface"
    COUPLED = "coupled"


class SpaceTimeSpace:
    """
    Continuous P^k_s in space times P^k_t in time, on the given active elements of a slab.

    :ivar elements: Sorted active element ids
    :ivar node_ids: Global Lagrange node ids carrying dofs, sorted
    :ivar element_dofs: Global dofs per active element, shape (n_active, local_size)
    """

    def __init__(self, nodes: LagrangeNodes, elements: np.ndarray, k_t: int, interval: tuple[float, float]):
        if k_t < 0:
            raise ValueError(f"Temporal order must be >= 0, got {k_t}")
        self.nodes = nodes
        self.k_s = nodes.order
        self.k_t = k_t
        self.interval = (float(interval[0]), float(interval[1]))
        self.elements = np.unique(np.asarray(elements, dtype=np.int64))
        self.spatial = lagrange_triangle(self.k_s)
        self.temporal = lobatto_basis(k_t + 1)

        n_elements = len(nodes.element_nodes)
        self.node_ids = np.unique(nodes.element_nodes[self.elements])
        self._compact = np.full(nodes.n_nodes, -1, dtype=np.int64)
        self._compact[self.node_ids] = np.arange(len(self.node_ids))
        self._rows = np.full(n_elements, -1, dtype=np.int64)
        self._rows[self.elements] = np.arange(len(self.elements))

        nt = self.n_time
        spatial = self._compact[nodes.element_nodes[self.elements]]
        self.element_dofs = (spatial[:, :, None] * nt + np.arange(nt)[None, None, :]).reshape(len(self.elements), -1)

    @property
    def n_time(self) -> int:
        return self.k_t + 1

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def n_dofs(self) -> int:
        return self.n_nodes * self.n_time

    @property
    def local_size(self) -> int:
        return self.spatial.size * self.n_time

    @property
    def dt(self) -> float:
        return self.interval[1] - self.interval[0]

    @property
    def node_coords(self) -> np.ndarray:
        return self.nodes.coords[self.node_ids]

    @property
    def times(self) -> np.ndarray:
        return self.interval[0] + self.dt * self.temporal.nodes

    def active_mask(self, elements) -> np.ndarray:
        return self._rows[np.asarray(elements, dtype=np.int64)] >= 0

    def dofs(self, elements) -> np.ndarray:
        """:return: global dofs of the given elements, shape (len(elements), local_size)"""
        rows = self._rows[np.asarray(elements, dtype=np.int64)]
        if np.any(rows < 0):
            missing = np.asarray(elements)[rows < 0]
            raise InactiveElement(f"Elements {missing[:5].tolist()} are not active")
        return self.element_dofs[rows]

    def compact_nodes(self, global_ids: np.ndarray) -> np.ndarray:
        """:return: positions of global Lagrange nodes in this space, -1 where inactive"""
        return self._compact[np.asarray(global_ids, dtype=np.int64)]


@dataclass(frozen=True, eq=False)
class CoupledSpace:
    """Stacked (bulk, surface) space; surface dofs start at offset."""

    bulk: SpaceTimeSpace
    surf: SpaceTimeSpace

    @property
    def offset(self) -> int:
        return self.bulk.n_dofs

    @property
    def n_dofs(self) -> int:
        return self.bulk.n_dofs + self.surf.n_dofs

    def split(self, vector: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return vector[: self.offset], vector[self.offset :]


def build_space(
    nodes: LagrangeNodes, elements: np.ndarray, k_t: int, interval: tuple[float, float] = (0.0, 1.0)
) -> SpaceTimeSpace:
    return SpaceTimeSpace(nodes, elements, k_t, interval)


def build_coupled_space(
    active: ActiveSets,
    mesh: BackgroundMesh,
    k_s: int,
    k_t: int,
    interval: tuple[float, float] = (0.0, 1.0),
    nodes: Optional[LagrangeNodes] = None,
) -> CoupledSpace:
    """
    :param active: Active sets of the slab; the bulk space lives on E_Q, the surface space on E_G
    :param mesh: Background mesh
    :param k_s: Spatial order
    :param k_t: Temporal order
    :param interval: The slab
    :param nodes: Precomputed P^k_s Lagrange nodes of the mesh
    :return: The coupled space
    """
    if not len(active.bulk):
        raise EmptyActiveSet("No active bulk element")
    if nodes is None:
        nodes = build_lagrange_nodes(mesh, k_s)
    elif nodes.order != k_s:
        raise ValueError(f"Lagrange nodes of order {nodes.order} given for k_s = {k_s}")
    return CoupledSpace(
        bulk=SpaceTimeSpace(nodes, active.bulk, k_t, interval),
        surf=SpaceTimeSpace(nodes, active.surface, k_t, interval),
    )


def eval_basis(space: SpaceTimeSpace, xi: np.ndarray, tau) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Local tensor-product basis on the reference configuration

    :param space: The space
    :param xi: Reference points, shape (m, 2)
    :param tau: Reference times in [0, 1], shape (m,) or scalar
    :return: (values (m, n), reference gradients (m, n, 2), tau derivatives (m, n)), n = local_size
    """
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    m = len(xi)
    tau = np.broadcast_to(np.asarray(tau, dtype=float), (m,))
    ls = space.spatial.eval(xi)
    dls = space.spatial.grad(xi)
    lt = space.temporal.eval(tau)
    dlt = space.temporal.deriv(tau)
    values = (ls[:, :, None] * lt[:, None, :]).reshape(m, -1)
    grads = (dls[:, :, None, :] * lt[:, None, :, None]).reshape(m, -1, 2)
    dtau = (ls[:, :, None] * dlt[:, None, :]).reshape(m, -1)
    return values, grads, dtau


@dataclass(frozen=True, eq=False)
class MappedBasis:
    """
    Local basis functions composed with the inverse mapping, at m points.

    :ivar values: shape (m, n)
    :ivar grads: Physical gradients, shape (m, n, 2)
    :ivar dt: Time derivatives at fixed physical position, shape (m, n)
    :ivar mapping: The mapping data at the points
    """

    values: np.ndarray
    grads: np.ndarray
    dt: np.ndarray
    mapping: MappingEval


def mapped_eval(
    space: SpaceTimeSpace,
    deformation: SlabDeformation,
    elements,
    xi: np.ndarray,
    t,
    mapping: Optional[MappingEval] = None,
) -> MappedBasis:
    """
    Chain rule through the slab mapping: grad u = J^-T B^-T grad_xi u, and
    du/dt|_x = du/dt|_xi - grad u . V.

    :param mapping: eval_mapping() at the same points, if already at hand
    """
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    m = len(xi)
    elements = np.broadcast_to(np.asarray(elements, dtype=np.int64), (m,))
    t = np.broadcast_to(np.asarray(t, dtype=float), (m,))
    if mapping is None:
        mapping = eval_mapping(deformation, elements, xi, t)
    values, gref, dtau = eval_basis(space, xi, (t - space.interval[0]) / space.dt)
    glin = np.einsum("mia,mac->mic", gref, deformation.mesh.Binv[elements])
    grads = np.einsum("mic,mcd->mid", glin, np.linalg.inv(mapping.J))
    dt = dtau / space.dt - np.einsum("mid,md->mi", grads, mapping.V)
    return MappedBasis(values=values, grads=grads, dt=dt, mapping=mapping)


@dataclass(frozen=True, eq=False)
class DiscreteFunction:
    """
    Coefficient vector on a space.

    For Component.COUPLED the space is a CoupledSpace and the coefficients are stacked
    (bulk, surface); otherwise it is a SpaceTimeSpace.
    """

    coefficients: np.ndarray
    space: object
    component: Component = Component.BULK

    def __post_init__(self):
        if len(self.coefficients) != self.space.n_dofs:
            raise ValueError(f"{len(self.coefficients)} coefficients for a space of {self.space.n_dofs} dofs")

    @classmethod
    def coupled(cls, coefficients: np.ndarray, space: CoupledSpace) -> DiscreteFunction:
        return cls(np.asarray(coefficients, dtype=float), space, Component.COUPLED)

    def part(self, component: Component) -> DiscreteFunction:
        if self.component is not Component.COUPLED:
            if component is not self.component:
                raise ValueError(f"A {self.component.value} function has no {component.value} part")
            return self
        bulk, surf = self.space.split(self.coefficients)
        if component is Component.BULK:
            return DiscreteFunction(bulk, self.space.bulk, Component.BULK)
        if component is Component.SURFACE:
            return DiscreteFunction(surf, self.space.surf, Component.SURFACE)
        return self

    @property
    def bulk(self) -> DiscreteFunction:
        return self.part(Component.BULK)

    @property
    def surface(self) -> DiscreteFunction:
        return self.part(Component.SURFACE)

    def nodal(self) -> np.ndarray:
        """:return: coefficients as (n_nodes, n_time)"""
        return self.coefficients.reshape(-1, self.space.n_time)

    def nodal_trace(self, tau: float) -> np.ndarray:
        """:return: spatial coefficients of the function frozen at reference time tau"""
        return self.nodal() @ self.space.temporal.eval([tau])[0]

    def evaluate(self, elements, xi: np.ndarray, tau) -> np.ndarray:
        """Values of the reference function at (element, xi, tau); raises InactiveElement."""
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        elements = np.broadcast_to(np.asarray(elements, dtype=np.int64), (len(xi),))
        dofs = self.space.dofs(elements)
        values, _, _ = eval_basis(self.space, xi, tau)
        return np.einsum("mi,mi->m", values, self.coefficients[dofs])

    def evaluate_mapped(
        self, deformation: SlabDeformation, elements, xi: np.ndarray, t
    ) -> tuple[np.ndarray, np.ndarray]:
        """:return: (values, physical gradients) through the slab mapping"""
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        elements = np.broadcast_to(np.asarray(elements, dtype=np.int64), (len(xi),))
        coeffs = self.coefficients[self.space.dofs(elements)]
        basis = mapped_eval(self.space, deformation, elements, xi, t)
        return np.einsum("mi,mi->m", basis.values, coeffs), np.einsum("mid,mi->md", basis.grads, coeffs)


def interpolate(space: SpaceTimeSpace, func: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> np.ndarray:
    """
    Nodal interpolation on the reference configuration

    :param space: Target space
    :param func: f(points (m, 2), times (m,)) -> (m,)
    :return: Coefficient vector
    """
    nt = space.n_time
    coords = np.repeat(space.node_coords, nt, axis=0)
    times = np.tile(space.times, space.n_nodes)
    return np.asarray(func(coords, times), dtype=float)
