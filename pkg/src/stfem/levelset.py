# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.
"""
Level set geometry per time slab.

The exact level set is replaced on every slab by phi^lin: piecewise linear in space, polynomial
in time, interpolated at Gauss–Lobatto times. Elements are classified by sampling the sign of
phi^lin at a handful of times; negative values mark the bulk domain.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Callable, Optional, Sequence

import numpy as np

from stfem.basis import gauss_lobatto_nodes, lobatto_basis
from stfem.mesh import BackgroundMesh

__all__ = [
    "ZERO_TOL",
    "EmptyActiveSet",
    "ElementMark",
    "LevelsetField",
    "SlabLevelsetLin",
    "ActiveSets",
    "perturb_degenerate",
    "interpolate_slab_levelset",
    "classify_slab",
    "build_facet_set",
]

# |phi| below this is treated as +ZERO_TOL
ZERO_TOL = 1e-14

PointField = Callable[[np.ndarray, float], np.ndarray]


class EmptyActiveSet(RuntimeError):
    """Raised if a level set never opens a bulk region on a slab"""

    pass


class ElementMark(IntEnum):
    NEG = -1
    CUT = 0
    POS = 1


def perturb_degenerate(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    return np.where(np.abs(values) < ZERO_TOL, ZERO_TOL, values)


@dataclass(frozen=True)
class LevelsetField:
    """
    Exact level set closures. Every closure takes points of shape (m, 2) and a time.

    :ivar phi: Level set values, shape (m,)
    :ivar grad: Spatial gradients, shape (m, 2)
    :ivar dt: Time derivatives, shape (m,)
    """

    phi: PointField
    grad: PointField
    dt: PointField

    @classmethod
    def planar(cls, normal: Sequence[float], offset: float, speed: float = 0.0) -> LevelsetField:
        """phi(x, t) = normal . x - offset - speed * t"""
        nrm = np.asarray(normal, dtype=float)
        return cls(
            phi=lambda x, t: np.asarray(x) @ nrm - offset - speed * t,
            grad=lambda x, t: np.broadcast_to(nrm, np.shape(x)).copy(),
            dt=lambda x, t: np.full(len(x), -speed),
        )


class SlabLevelsetLin:
    """
    phi^lin on one slab: per mesh vertex, a polynomial in time of the given order, stored as its
    values at the order + 1 Gauss–Lobatto times of the slab.
    """

    def __init__(self, mesh: BackgroundMesh, interval: tuple[float, float], order: int, values: np.ndarray):
        self.mesh = mesh
        self.interval = (float(interval[0]), float(interval[1]))
        self.order = order
        self.values = np.asarray(values, dtype=float)
        self._basis = lobatto_basis(order + 1)
        if self.values.shape != (mesh.n_vertices, order + 1):
            raise ValueError(f"Expected values of shape {(mesh.n_vertices, order + 1)}, got {self.values.shape}")

    @property
    def dt(self) -> float:
        return self.interval[1] - self.interval[0]

    def tau(self, t) -> np.ndarray:
        return (np.asarray(t, dtype=float) - self.interval[0]) / self.dt

    def _time_weights(self, t) -> np.ndarray:
        tau = np.atleast_1d(self.tau(t))
        weights = self._basis.eval(tau)
        # interpolation times are reproduced bit-exactly
        hit = np.abs(tau[:, None] - self._basis.nodes[None, :]) < 1e-13
        rows = hit.any(axis=1)
        weights[rows] = hit[rows].astype(float)
        return weights

    def vertex_values(self, t) -> np.ndarray:
        """:return: (n_vertices,) for a scalar t, (n_vertices, len(t)) otherwise"""
        vals = self.values @ self._time_weights(t).T
        return vals[:, 0] if np.ndim(t) == 0 else vals

    def element_values(self, elements: np.ndarray, t: float) -> np.ndarray:
        """:return: vertex values of the given elements at time t, shape (len(elements), 3)"""
        return self.vertex_values(t)[self.mesh.elements[elements]]

    def element_gradients(self, elements: np.ndarray, t) -> np.ndarray:
        """
        Spatial gradients of phi^lin in background coordinates.

        :param elements: Element ids, shape (m,)
        :param t: A scalar time or one time per element
        :return: shape (m, 2)
        """
        elements = np.asarray(elements)
        if np.ndim(t) == 0:
            vals = self.element_values(elements, float(t))
        else:
            t = np.asarray(t, dtype=float)
            uniq, inverse = np.unique(t, return_inverse=True)
            table = self.vertex_values(uniq)
            vals = table[self.mesh.elements[elements], inverse.reshape(-1)[:, None]]
        dref = np.column_stack([vals[:, 1] - vals[:, 0], vals[:, 2] - vals[:, 0]])
        return np.einsum("ma,mac->mc", dref, self.mesh.Binv[elements])

    def time_derivatives(self, elements: np.ndarray, xi: np.ndarray, t: np.ndarray) -> np.ndarray:
        """
        d phi^lin / dt at points given per element.

        :param elements: Element ids, shape (m,)
        :param xi: Reference points, shape (m, 2)
        :param t: Times, shape (m,)
        :return: shape (m,)
        """
        elements = np.asarray(elements)
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        uniq, inverse = np.unique(np.atleast_1d(np.asarray(t, dtype=float)), return_inverse=True)
        table = self.values @ self._basis.deriv(self.tau(uniq)).T / self.dt
        vals = table[self.mesh.elements[elements], inverse.reshape(-1)[:, None]]
        bary = np.column_stack([1.0 - xi[:, 0] - xi[:, 1], xi[:, 0], xi[:, 1]])
        return np.einsum("ma,ma->m", bary, vals)


def interpolate_slab_levelset(
    phi: LevelsetField, mesh: BackgroundMesh, interval: tuple[float, float], order: int
) -> SlabLevelsetLin:
    """
    Vertex-wise interpolation in time at order + 1 Gauss–Lobatto times of the slab

    :param phi: The exact level set
    :param mesh: Background mesh
    :param interval: (t_{n-1}, t_n)
    :param order: Temporal order, >= 1
    :return: phi^lin of the slab
    """
    if order < 1:
        raise ValueError(f"Temporal order must be >= 1, got {order}")
    t0, t1 = interval
    times = t0 + (t1 - t0) * gauss_lobatto_nodes(order + 1)
    times[0], times[-1] = t0, t1
    values = np.column_stack([np.asarray(phi.phi(mesh.vertices, t), dtype=float) for t in times])
    return SlabLevelsetLin(mesh, (t0, t1), order, values)


@dataclass(frozen=True, eq=False)
class ActiveSets:
    """
    Active element and facet sets of a slab.

    :ivar bulk: Sorted element ids of E_Q
    :ivar surface: Sorted element ids of E_G
    :ivar facets: Sorted facet ids of F_n
    :ivar marks: ElementMark per element and sample time, shape (n_elements, n_samples)
    :ivar sample_times: The sample times
    """

    bulk: np.ndarray
    surface: np.ndarray
    facets: np.ndarray
    marks: np.ndarray
    sample_times: np.ndarray

    @property
    def n_elements(self) -> int:
        return self.marks.shape[0]

    def _mask(self, ids: np.ndarray) -> np.ndarray:
        mask = np.zeros(self.n_elements, dtype=bool)
        mask[ids] = True
        return mask

    @property
    def bulk_mask(self) -> np.ndarray:
        return self._mask(self.bulk)

    @property
    def surface_mask(self) -> np.ndarray:
        return self._mask(self.surface)

    @property
    def interior_mask(self) -> np.ndarray:
        """Elements entirely inside the bulk domain at every sample time"""
        return np.all(self.marks == ElementMark.NEG, axis=1)


def classify_slab(
    slab_phi: SlabLevelsetLin,
    n_samples: Optional[int] = None,
    *,
    strip_width: float = 0.0,
    extra_times: Optional[Sequence[float]] = None,
) -> ActiveSets:
    """
    Classifies elements by sampling the sign of phi^lin

    :param slab_phi: phi^lin of the slab
    :param n_samples: Number of uniform sample times (endpoints included), at least 2*order + 5
    :param strip_width: Elements whose minimum vertex value is below this join E_Q (safety strip)
    :param extra_times: Additional sample times inside the slab
    :return: The active sets, F_n included
    """
    min_samples = 2 * slab_phi.order + 5
    if n_samples is None:
        n_samples = min_samples
    if n_samples < min_samples:
        raise ValueError(f"n_samples must be at least {min_samples}, got {n_samples}")
    t0, t1 = slab_phi.interval
    times = np.linspace(t0, t1, n_samples)
    if extra_times is not None and len(extra_times):
        times = np.unique(np.concatenate([times, np.clip(np.asarray(extra_times, dtype=float), t0, t1)]))

    vals = perturb_degenerate(slab_phi.vertex_values(times))[slab_phi.mesh.elements]
    emin = vals.min(axis=1)
    emax = vals.max(axis=1)
    marks = np.full(emin.shape, ElementMark.CUT, dtype=np.int8)
    marks[emax < 0.0] = ElementMark.NEG
    marks[emin > 0.0] = ElementMark.POS

    bulk = np.flatnonzero(emin.min(axis=1) < max(strip_width, 0.0))
    if len(bulk) == 0:
        raise EmptyActiveSet(f"No bulk element on slab [{t0}, {t1}]")
    surface = np.flatnonzero(np.any(marks == ElementMark.CUT, axis=1))

    active = ActiveSets(bulk=bulk, surface=surface, facets=np.empty(0, dtype=np.int64), marks=marks, sample_times=times)
    return ActiveSets(
        bulk=bulk,
        surface=surface,
        facets=build_facet_set(active, slab_phi.mesh),
        marks=marks,
        sample_times=times,
    )


def build_facet_set(active: ActiveSets, mesh: BackgroundMesh) -> np.ndarray:
    """
    Ghost penalty facets: interior facets with both neighbours in E_Q and at least one neighbour
    that is not inside the bulk domain at every sample time (cut or safety-strip element).
    """
    interior = mesh.interior_facets
    pair = mesh.facet_elements[interior]
    bulk = active.bulk_mask
    loose = bulk & ~active.interior_mask
    keep = bulk[pair[:, 0]] & bulk[pair[:, 1]] & (loose[pair[:, 0]] | loose[pair[:, 1]])
    return interior[keep]
