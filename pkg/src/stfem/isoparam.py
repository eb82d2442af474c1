# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.
"""
Time-dependent isoparametric mapping of one slab.

The mapping Theta(x, t) = x + d(x, t) moves the zero line of phi^lin onto the zero line of the
higher-order interpolant phi_h. The displacement d is continuous P^q_s in space on the mesh
Lagrange nodes and Lagrange in time through q_t + 1 Gauss–Lobatto times of the slab. All
Jacobians are taken with respect to background (undeformed) coordinates.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from stfem.basis import gauss_lobatto_nodes, lagrange_triangle, lobatto_basis
from stfem.levelset import ActiveSets, LevelsetField, SlabLevelsetLin
from stfem.mesh import BackgroundMesh, LagrangeNodes

__all__ = [
    "MappingDegenerate",
    "MappingEval",
    "SlabDeformation",
    "deformation_times",
    "interpolate_ho_levelset",
    "build_slab_deformation",
    "eval_mapping",
    "transform_normals",
    "discrete_normal",
]

DET_TOL = 1e-12
ROOT_TOL = 1e-13
ROOT_MAXITER = 60


class MappingDegenerate(ArithmeticError):
    """Raised if the mapped element Jacobian is (nearly) singular or inverted"""

    pass


@dataclass(frozen=True, eq=False)
class MappingEval:
    """
    :ivar x: Mapped physical points, shape (m, 2)
    :ivar J: Spatial Jacobians d Theta / d x_lin, shape (m, 2, 2)
    :ivar V: Mesh velocities d Theta / dt, shape (m, 2)
    :ivar detJ: det(J), shape (m,)
    """

    x: np.ndarray
    J: np.ndarray
    V: np.ndarray
    detJ: np.ndarray


def deformation_times(interval: tuple[float, float], q_t: int) -> np.ndarray:
    t0, t1 = interval
    times = t0 + (t1 - t0) * gauss_lobatto_nodes(q_t + 1)
    times[0], times[-1] = t0, t1
    return times


class SlabDeformation:
    """
    Displacement field of a slab.

    :ivar displacements: Nodal displacements per time node, shape (q_t + 1, n_nodes, 2), or None
        for the identity mapping
    :ivar support: Elements with a nonzero displacement somewhere
    :ivar failed_roots: Number of node corrections that fell back to zero
    """

    def __init__(
        self,
        mesh: BackgroundMesh,
        interval: tuple[float, float],
        q_t: int,
        nodes: Optional[LagrangeNodes] = None,
        displacements: Optional[np.ndarray] = None,
        failed_roots: int = 0,
    ):
        self.mesh = mesh
        self.interval = (float(interval[0]), float(interval[1]))
        self.q_t = q_t
        self.nodes = nodes
        self.failed_roots = failed_roots
        if displacements is not None and not np.any(displacements):
            displacements = None
        self.displacements = displacements
        if displacements is None:
            self.support = np.zeros(mesh.n_elements, dtype=bool)
        else:
            moving = np.any(displacements != 0.0, axis=(0, 2))
            self.support = moving[nodes.element_nodes].any(axis=1)
        self._time_basis = lobatto_basis(q_t + 1)

    @classmethod
    def identity(cls, mesh: BackgroundMesh, interval: tuple[float, float], q_t: int = 1) -> SlabDeformation:
        return cls(mesh, interval, q_t)

    @property
    def is_identity(self) -> bool:
        return self.displacements is None

    @property
    def q_s(self) -> int:
        return 1 if self.nodes is None else self.nodes.order

    @property
    def dt(self) -> float:
        return self.interval[1] - self.interval[0]

    @property
    def times(self) -> np.ndarray:
        return deformation_times(self.interval, self.q_t)


def interpolate_ho_levelset(phi: LevelsetField, nodes: LagrangeNodes, times: np.ndarray) -> np.ndarray:
    """:return: nodal values of phi_h at every time, shape (n_nodes, len(times))"""
    return np.column_stack([np.asarray(phi.phi(nodes.coords, float(t)), dtype=float) for t in times])


def _node_steps(
    coeffs: np.ndarray, ref_nodes: np.ndarray, directions: np.ndarray, target: np.ndarray, cap: float, order: int
) -> tuple[np.ndarray, np.ndarray]:
    """
    Safeguarded Newton (bisection fallback) for phi_T(xi + alpha * direction) = target, vectorised
    over (element, node).

    :return: (alpha, failed), both of shape target.shape
    """
    tri = lagrange_triangle(order)
    ne, nl = target.shape

    def residual(alpha: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        xi = (ref_nodes[None, :, :] + alpha[..., None] * directions).reshape(-1, 2)
        vals = tri.eval(xi).reshape(ne, nl, -1)
        grads = tri.grad(xi).reshape(ne, nl, -1, 2)
        f = np.einsum("eqb,eb->eq", vals, coeffs) - target
        df = np.einsum("eqba,eb,eqa->eq", grads, coeffs, directions)
        return f, df

    lo = np.full(target.shape, -cap)
    hi = np.full(target.shape, cap)
    f_lo, _ = residual(lo)
    f_hi, _ = residual(hi)
    failed = f_lo * f_hi > 0.0
    alpha = np.zeros(target.shape)
    running = ~failed
    for _ in range(ROOT_MAXITER):
        if not running.any():
            break
        fa, dfa = residual(alpha)
        below = np.sign(fa) == np.sign(f_lo)
        lo = np.where(running & below, alpha, lo)
        f_lo = np.where(running & below, fa, f_lo)
        hi = np.where(running & ~below, alpha, hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = alpha - fa / dfa
        inside = np.isfinite(newton) & (newton > lo) & (newton < hi)
        step = np.where(inside, newton, 0.5 * (lo + hi))
        done = (np.abs(step - alpha) < ROOT_TOL) | (fa == 0.0)
        alpha = np.where(running & (fa != 0.0), step, alpha)
        running &= ~done
    return alpha, failed


def build_slab_deformation(
    phi_h: np.ndarray, slab_phi: SlabLevelsetLin, active: ActiveSets, nodes: LagrangeNodes
) -> SlabDeformation:
    """
    Constructs the slab displacement

    :param phi_h: Nodal values of phi_h at the deformation times, shape (n_nodes, q_t + 1)
    :param slab_phi: phi^lin of the slab
    :param active: Active sets; displacements are computed on the surface elements
    :param nodes: P^q_s Lagrange nodes; q_s = 1 yields the identity
    :return: The deformation
    """
    mesh = slab_phi.mesh
    q_t = phi_h.shape[1] - 1
    if nodes.order == 1 or not len(active.surface):
        return SlabDeformation(mesh, slab_phi.interval, q_t)

    tri = lagrange_triangle(nodes.order)
    ref_nodes = tri.nodes
    node_grads = tri.grad(ref_nodes)
    bary = np.column_stack([1.0 - ref_nodes[:, 0] - ref_nodes[:, 1], ref_nodes[:, 0], ref_nodes[:, 1]])

    elements = active.surface
    element_nodes = nodes.element_nodes[elements]
    binv = mesh.Binv[elements]
    cap = 0.5 * mesh.h
    times = deformation_times(slab_phi.interval, q_t)

    displacements = np.zeros((q_t + 1, nodes.n_nodes, 2))
    counts = np.zeros(nodes.n_nodes)
    np.add.at(counts, element_nodes.ravel(), 1.0)
    hit = counts > 0
    failed_total = 0
    for j, t in enumerate(times):
        coeffs = phi_h[element_nodes, j]
        target = slab_phi.element_values(elements, float(t)) @ bary.T
        gref = np.einsum("qba,eb->eqa", node_grads, coeffs)
        glin = np.einsum("eqa,eac->eqc", gref, binv)
        gnorm = np.linalg.norm(glin, axis=-1)
        flat = gnorm < 1e-14
        direction = glin / np.where(flat, 1.0, gnorm)[..., None]
        ref_direction = np.einsum("eac,eqc->eqa", binv, direction)
        alpha, failed = _node_steps(coeffs, ref_nodes, ref_direction, target, cap, nodes.order)
        failed |= flat
        alpha[failed] = 0.0
        failed_total += int(failed.sum())

        sums = np.zeros((nodes.n_nodes, 2))
        np.add.at(sums, element_nodes.ravel(), (alpha[..., None] * direction).reshape(-1, 2))
        displacements[j, hit] = sums[hit] / counts[hit, None]

    if failed_total:
        warnings.warn(f"{failed_total} node corrections fell back to zero displacement", RuntimeWarning)
    return SlabDeformation(mesh, slab_phi.interval, q_t, nodes, displacements, failed_total)


def eval_mapping(deformation: SlabDeformation, elements, xi: np.ndarray, t) -> MappingEval:
    """
    Evaluates Theta and its derivatives

    :param deformation: The slab deformation
    :param elements: Element id per point (or one id for all points)
    :param xi: Reference points, shape (m, 2)
    :param t: Absolute time per point (or one time)
    :return: The mapping data
    """
    mesh = deformation.mesh
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    m = len(xi)
    elements = np.broadcast_to(np.asarray(elements, dtype=np.int64), (m,))
    t = np.broadcast_to(np.asarray(t, dtype=float), (m,))

    x = mesh.to_physical(elements, xi)
    J = np.tile(np.eye(2), (m, 1, 1))
    V = np.zeros((m, 2))
    if not deformation.is_identity:
        sel = np.flatnonzero(deformation.support[elements])
        if len(sel):
            e = elements[sel]
            tau = (t[sel] - deformation.interval[0]) / deformation.dt
            time_basis = deformation._time_basis
            lt = time_basis.eval(tau)
            dlt = time_basis.deriv(tau) / deformation.dt
            tri = lagrange_triangle(deformation.q_s)
            ls = tri.eval(xi[sel])
            dls = tri.grad(xi[sel])
            nodal = deformation.displacements[:, deformation.nodes.element_nodes[e], :]
            x[sel] += np.einsum("mj,mb,jmbc->mc", lt, ls, nodal)
            V[sel] = np.einsum("mj,mb,jmbc->mc", dlt, ls, nodal)
            gref = np.einsum("mj,mba,jmbc->mca", lt, dls, nodal)
            J[sel] += np.einsum("mca,mab->mcb", gref, mesh.Binv[e])
    detJ = np.linalg.det(J)
    if np.any(detJ <= DET_TOL):
        raise MappingDegenerate(f"det J = {detJ.min():.3e} on slab {deformation.interval}")
    return MappingEval(x=x, J=J, V=V, detJ=detJ)


def transform_normals(mapping: MappingEval, n_lin: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    :param mapping: Mapping data at the points
    :param n_lin: Unit normals in background coordinates, shape (m, 2)
    :return: (mapped unit normals, surface measure factors detJ * |J^-T n_lin|)
    """
    jinv = np.linalg.inv(mapping.J)
    pushed = np.einsum("mcd,mc->md", jinv, n_lin)
    size = np.linalg.norm(pushed, axis=1)
    safe = np.where(size > 0.0, size, 1.0)
    return pushed / safe[:, None], mapping.detJ * size


def discrete_normal(
    deformation: SlabDeformation, elements, xi: np.ndarray, t, n_lin: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """:return: (n_h, surface measure factor) at the given points"""
    mapping = eval_mapping(deformation, elements, xi, t)
    return transform_normals(mapping, np.atleast_2d(n_lin))
