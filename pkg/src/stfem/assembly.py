# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.
"""
Assembly of the slab system.

The global matrix is indexed A[test, trial] over the stacked (bulk, surface) dofs of a
CoupledSpace. Local contributions are computed per quadrature point in vectorised form, summed
per element with np.add.reduceat over the element blocks of a QuadBatch, and scattered as COO
triplets. Chunks of points can be processed by a thread pool (STFEM_THREADS); in deterministic
mode the triplets are concatenated in submission order so that the summation order, and thus
the result, is reproducible bit for bit.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Callable, Iterable, Optional, Protocol

import numpy as np
import scipy.sparse as sp

from stfem.basis import lobatto_basis, triangle_rule
from stfem.isoparam import MappingEval, SlabDeformation, eval_mapping, transform_normals
from stfem.levelset import ActiveSets, SlabLevelsetLin
from stfem.mesh import BackgroundMesh
from stfem.quadrature import (
    QuadBatch,
    QuadTag,
    boundary_batch,
    element_batch,
    slice_batch,
    surface_batch,
    volume_batch,
)
from stfem.spaces import (
    CoupledSpace,
    DiscreteFunction,
    InactiveElement,
    MappedBasis,
    SpaceTimeSpace,
    eval_basis,
    mapped_eval,
)

__all__ = [
    "TransferOutOfDomain",
    "Model",
    "SurfaceDivergence",
    "SurfaceTransport",
    "ModelParams",
    "SlabContext",
    "IncomingTrace",
    "InitialTrace",
    "SlabTrace",
    "Triplets",
    "assemble_bulk_form",
    "assemble_surface_form",
    "assemble_upwind",
    "assemble_coupling",
    "assemble_ghost_penalty",
    "assemble_normal_grad_stab",
    "assemble_sources",
    "SlabSystem",
    "assemble_slab_system",
    "write_triplets",
]

PointField = Callable[[np.ndarray, np.ndarray], np.ndarray]

# Upper bound on the number of floats held by one chunk of per-point local matrices
LOCAL_BUDGET = 2**22


class TransferOutOfDomain(LookupError):
    """The previous slab has no function on an element the new slab needs at t_{n-1}"""

    pass


class Model(Enum):
    HENRY = "henry"
    LANGMUIR = "langmuir"


class SurfaceDivergence(Enum):
    JACOBIAN = "jacobian"
    NONE = "none"


class SurfaceTransport(Enum):
    """
    Convective velocity of the surface form.

    INTERFACE replaces the normal part of w by the normal velocity of the discrete interface;
    MATERIAL uses w as given.
    """

    INTERFACE = "interface"
    MATERIAL = "material"


@dataclass(frozen=True)
class ModelParams:
    """
    Material constants and data closures. Closures take points (m, 2) and times (m,).

    velocity_grad returns the Jacobian of w, shape (m, 2, 2) with [i, j] = d w_i / d x_j.
    boundary_flux returns the flux vector k_B grad u_B on the outer boundary, shape (m, 2).
    """

    k_B: float
    k_S: float
    b_B: float
    b_S: float
    b_BS: float
    gamma_B: float
    gamma_S: float
    velocity: PointField
    velocity_grad: PointField
    u_B0: PointField
    u_S0: PointField
    f_B: Optional[PointField] = None
    f_S: Optional[PointField] = None
    interface_source: Optional[PointField] = None
    boundary_flux: Optional[PointField] = None
    divergence: SurfaceDivergence = SurfaceDivergence.JACOBIAN
    transport: SurfaceTransport = SurfaceTransport.INTERFACE

    def __post_init__(self):
        if not (self.k_B > 0.0 and self.k_S > 0.0):
            raise ValueError(f"Diffusivities must be positive, got k_B={self.k_B}, k_S={self.k_S}")
        if self.gamma_B < 0.0 or self.gamma_S < 0.0:
            raise ValueError(f"Stabilisation constants must be >= 0, got {self.gamma_B}, {self.gamma_S}")


@dataclass(eq=False)
class SlabContext:
    """Geometry, spaces and quadrature of one slab."""

    n: int
    slab_phi: SlabLevelsetLin
    active: ActiveSets
    deformation: SlabDeformation
    space: CoupledSpace
    order_s: int
    order_t: int
    threads: int = 1
    deterministic: bool = True

    @property
    def mesh(self) -> BackgroundMesh:
        return self.slab_phi.mesh

    @property
    def interval(self) -> tuple[float, float]:
        return self.slab_phi.interval

    @property
    def dt(self) -> float:
        return self.slab_phi.dt

    @property
    def n_dofs(self) -> int:
        return self.space.n_dofs

    @cached_property
    def volume(self) -> QuadBatch:
        return volume_batch(self.slab_phi, self.active.bulk, self.order_s, self.order_t)

    @cached_property
    def surface(self) -> QuadBatch:
        return surface_batch(self.slab_phi, self.active.surface, self.order_s, self.order_t)

    @cached_property
    def slice_volume(self) -> QuadBatch:
        return slice_batch(self.slab_phi, self.active.bulk, self.interval[0], QuadTag.SLICE_VOL, self.order_s)

    @cached_property
    def slice_surface(self) -> QuadBatch:
        return slice_batch(self.slab_phi, self.active.surface, self.interval[0], QuadTag.SLICE_IF, self.order_s)

    @cached_property
    def stabilised(self) -> QuadBatch:
        return element_batch(self.mesh, self.active.surface, self.interval, self.order_s, self.order_t)

    @cached_property
    def boundary(self) -> QuadBatch:
        mesh = self.mesh
        facets = mesh.boundary_facets
        facets = facets[self.active.bulk_mask[mesh.facet_elements[facets, 0]]]
        return boundary_batch(self.slab_phi, facets, self.order_s, self.order_t)


class IncomingTrace(Protocol):
    """Data at t_{n-1} entering a slab through the upwind terms"""

    def bulk(self, elements: np.ndarray, xi: np.ndarray, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        ...

    def surface(self, elements: np.ndarray, xi: np.ndarray, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        ...


class InitialTrace:
    """Initial data, evaluated at mapped physical points"""

    def __init__(self, u_B0: PointField, u_S0: PointField):
        self.u_B0 = u_B0
        self.u_S0 = u_S0

    def bulk(self, elements, xi, x, t):
        return np.asarray(self.u_B0(x, t), dtype=float)

    def surface(self, elements, xi, x, t):
        return np.asarray(self.u_S0(x, t), dtype=float)


class SlabTrace:
    """
    The t_n trace of a solved slab, read at the same reference point: the old function is
    composed with the old mapping, the new test functions with the new one.
    """

    def __init__(self, solution: DiscreteFunction):
        self.solution = solution

    def _read(self, part: DiscreteFunction, elements, xi) -> np.ndarray:
        try:
            return part.evaluate(elements, xi, 1.0)
        except InactiveElement as e:
            raise TransferOutOfDomain(f"Previous slab carries no {part.component.value} function there: {e}") from e

    def bulk(self, elements, xi, x, t):
        return self._read(self.solution.bulk, elements, xi)

    def surface(self, elements, xi, x, t):
        return self._read(self.solution.surface, elements, xi)


@dataclass
class Triplets:
    """COO fragments, merged into a matrix on demand"""

    rows: list[np.ndarray] = field(default_factory=list)
    cols: list[np.ndarray] = field(default_factory=list)
    vals: list[np.ndarray] = field(default_factory=list)

    def add_local(self, rows: np.ndarray, cols: np.ndarray, local: np.ndarray) -> None:
        """rows (E, n), cols (E, m), local (E, n, m)"""
        ne, nr = rows.shape
        nc = cols.shape[1]
        self.rows.append(np.broadcast_to(rows[:, :, None], (ne, nr, nc)).ravel())
        self.cols.append(np.broadcast_to(cols[:, None, :], (ne, nr, nc)).ravel())
        self.vals.append(local.ravel())

    def extend(self, other: Triplets) -> None:
        self.rows.extend(other.rows)
        self.cols.extend(other.cols)
        self.vals.extend(other.vals)

    def to_matrix(self, n: int) -> sp.csr_matrix:
        if not self.vals:
            return sp.csr_matrix((n, n))
        coo = sp.coo_matrix(
            (np.concatenate(self.vals), (np.concatenate(self.rows), np.concatenate(self.cols))), shape=(n, n)
        )
        matrix = coo.tocsr()
        # entries that summed to zero are not stored
        matrix.eliminate_zeros()
        return matrix


def _run_chunks(ctx: SlabContext, work: Callable, chunks: Iterable) -> list:
    """Runs work over chunks; results in submission order unless determinism is off."""
    chunks = list(chunks)
    if ctx.threads <= 1 or len(chunks) <= 1:
        return [work(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=ctx.threads) as pool:
        if ctx.deterministic:
            return list(pool.map(work, chunks))
        futures = [pool.submit(work, c) for c in chunks]
        return [f.result() for f in as_completed(futures)]


def _component(ctx: SlabContext, surface: bool) -> tuple[SpaceTimeSpace, int]:
    return (ctx.space.surf, ctx.space.offset) if surface else (ctx.space.bulk, 0)


def _chunk_points(n_local: int) -> int:
    return max(64, LOCAL_BUDGET // max(1, n_local))


def _matrix_from_batch(
    ctx: SlabContext,
    batch: QuadBatch,
    kernel: Callable[[QuadBatch, MappedBasis, MappedBasis], np.ndarray],
    test_surface: bool,
    trial_surface: bool,
) -> sp.csr_matrix:
    test_space, test_offset = _component(ctx, test_surface)
    trial_space, trial_offset = _component(ctx, trial_surface)

    def work(chunk: QuadBatch) -> Triplets:
        mapping = eval_mapping(ctx.deformation, chunk.elements, chunk.points, chunk.times)
        test = mapped_eval(test_space, ctx.deformation, chunk.elements, chunk.points, chunk.times, mapping)
        if trial_space is test_space:
            trial = test
        else:
            trial = mapped_eval(trial_space, ctx.deformation, chunk.elements, chunk.points, chunk.times, mapping)
        starts = chunk.segment_starts()
        local = np.add.reduceat(kernel(chunk, test, trial), starts, axis=0)
        elements = chunk.elements[starts]
        out = Triplets()
        out.add_local(test_space.dofs(elements) + test_offset, trial_space.dofs(elements) + trial_offset, local)
        return out

    merged = Triplets()
    n_local = test_space.local_size * trial_space.local_size
    for part in _run_chunks(ctx, work, batch.chunks(_chunk_points(n_local))):
        merged.extend(part)
    return merged.to_matrix(ctx.n_dofs)


def _vector_from_batch(
    ctx: SlabContext, batch: QuadBatch, kernel: Callable[[QuadBatch, MappedBasis], np.ndarray], surface: bool
) -> np.ndarray:
    space, offset = _component(ctx, surface)

    def work(chunk: QuadBatch) -> tuple[np.ndarray, np.ndarray]:
        basis = mapped_eval(space, ctx.deformation, chunk.elements, chunk.points, chunk.times)
        starts = chunk.segment_starts()
        local = np.add.reduceat(kernel(chunk, basis), starts, axis=0)
        return (space.dofs(chunk.elements[starts]) + offset).ravel(), local.ravel()

    out = np.zeros(ctx.n_dofs)
    for rows, vals in _run_chunks(ctx, work, batch.chunks(_chunk_points(space.local_size))):
        out += np.bincount(rows, weights=vals, minlength=ctx.n_dofs)
    return out


def _surface_geometry(chunk: QuadBatch, mapping: MappingEval) -> tuple[np.ndarray, np.ndarray]:
    """:return: (n_h, weights times the surface measure factor)"""
    normals, factor = transform_normals(mapping, chunk.normals)
    return normals, chunk.weights * factor


def _projector(normals: np.ndarray) -> np.ndarray:
    return np.eye(2)[None, :, :] - np.einsum("md,me->mde", normals, normals)


def assemble_bulk_form(ctx: SlabContext, params: ModelParams) -> sp.csr_matrix:
    """(du/dt + w . grad u, v) + k_B (grad u, grad v) over the mapped slab volume, unscaled"""

    def kernel(chunk: QuadBatch, v: MappedBasis, u: MappedBasis) -> np.ndarray:
        mapping = v.mapping
        w = params.velocity(mapping.x, chunk.times)
        transport = u.dt + np.einsum("mjd,md->mj", u.grads, w)
        local = np.einsum("mi,mj->mij", v.values, transport)
        local += params.k_B * np.einsum("mid,mjd->mij", v.grads, u.grads)
        return local * (chunk.weights * mapping.detJ)[:, None, None]

    return _matrix_from_batch(ctx, ctx.volume, kernel, False, False)


def _surface_divergence(params: ModelParams, x: np.ndarray, t: np.ndarray, projector: np.ndarray) -> np.ndarray:
    if params.divergence is SurfaceDivergence.NONE:
        return np.zeros(len(x))
    grad_w = params.velocity_grad(x, t)
    return np.einsum("mde,med->m", projector, grad_w)


def _interface_velocity(
    ctx: SlabContext, chunk: QuadBatch, mapping: MappingEval, normals: np.ndarray, w: np.ndarray
) -> np.ndarray:
    """
    Tangential part of w plus the normal velocity of the mapped discrete interface.

    A point y(t) on {phi^lin = 0} moves with -(d phi^lin / dt) grad phi^lin / |grad phi^lin|^2; its
    image under the mapping moves with J y' + V.
    """
    grads = ctx.slab_phi.element_gradients(chunk.elements, chunk.times)
    rates = ctx.slab_phi.time_derivatives(chunk.elements, chunk.points, chunk.times)
    drift = -(rates / np.einsum("md,md->m", grads, grads))[:, None] * grads
    moving = np.einsum("mde,me->md", mapping.J, drift) + mapping.V
    speed = np.einsum("md,md->m", normals, moving)
    along = w - np.einsum("md,md->m", normals, w)[:, None] * normals
    return along + speed[:, None] * normals


def assemble_surface_form(ctx: SlabContext, params: ModelParams) -> sp.csr_matrix:
    """
    (du/dt + w_G . grad u + u div_G w, v) + k_S (grad_G u, grad_G v) over the mapped surface, unscaled

    w_G is w itself or, by default, its tangential part plus the normal velocity of the interface.
    """

    def kernel(chunk: QuadBatch, v: MappedBasis, u: MappedBasis) -> np.ndarray:
        mapping = v.mapping
        normals, weights = _surface_geometry(chunk, mapping)
        proj = _projector(normals)
        w = params.velocity(mapping.x, chunk.times)
        div = _surface_divergence(params, mapping.x, chunk.times, proj)
        if params.transport is SurfaceTransport.INTERFACE:
            w = _interface_velocity(ctx, chunk, mapping, normals, w)
        transport = u.dt + np.einsum("mjd,md->mj", u.grads, w) + div[:, None] * u.values
        tangential_u = np.einsum("mde,mje->mjd", proj, u.grads)
        tangential_v = np.einsum("mde,mie->mid", proj, v.grads)
        local = np.einsum("mi,mj->mij", v.values, transport)
        local += params.k_S * np.einsum("mid,mjd->mij", tangential_v, tangential_u)
        return local * weights[:, None, None]

    return _matrix_from_batch(ctx, ctx.surface, kernel, True, True)


def assemble_upwind(
    ctx: SlabContext, params: ModelParams, incoming: IncomingTrace
) -> tuple[sp.csr_matrix, np.ndarray]:
    """
    Trace masses at t_{n-1} on the new geometry, and the same products against the incoming data

    :return: (b_B M_bulk + b_S M_surf, f_upw)
    """

    def volume_kernel(chunk: QuadBatch, v: MappedBasis, u: MappedBasis) -> np.ndarray:
        scale = params.b_B * chunk.weights * v.mapping.detJ
        return np.einsum("mi,mj->mij", v.values, u.values) * scale[:, None, None]

    def surface_kernel(chunk: QuadBatch, v: MappedBasis, u: MappedBasis) -> np.ndarray:
        _, weights = _surface_geometry(chunk, v.mapping)
        return np.einsum("mi,mj->mij", v.values, u.values) * (params.b_S * weights)[:, None, None]

    def volume_rhs(chunk: QuadBatch, v: MappedBasis) -> np.ndarray:
        old = incoming.bulk(chunk.elements, chunk.points, v.mapping.x, chunk.times)
        return v.values * (params.b_B * chunk.weights * v.mapping.detJ * old)[:, None]

    def surface_rhs(chunk: QuadBatch, v: MappedBasis) -> np.ndarray:
        _, weights = _surface_geometry(chunk, v.mapping)
        old = incoming.surface(chunk.elements, chunk.points, v.mapping.x, chunk.times)
        return v.values * (params.b_S * weights * old)[:, None]

    matrix = _matrix_from_batch(ctx, ctx.slice_volume, volume_kernel, False, False)
    matrix = matrix + _matrix_from_batch(ctx, ctx.slice_surface, surface_kernel, True, True)
    vector = _vector_from_batch(ctx, ctx.slice_volume, volume_rhs, False)
    vector += _vector_from_batch(ctx, ctx.slice_surface, surface_rhs, True)
    return matrix, vector


class _SurfacePairs:
    """Bulk and surface basis values at every space-time surface point of a slab."""

    def __init__(self, ctx: SlabContext):
        self.ctx = ctx
        batch = ctx.surface
        bulk, surf = ctx.space.bulk, ctx.space.surf
        self.n_dofs = ctx.n_dofs
        self.starts = batch.segment_starts()
        if not batch.size:
            self.weights = np.empty(0)
            self.bulk_values = np.empty((0, bulk.local_size))
            self.surf_values = np.empty((0, surf.local_size))
            self.bulk_dofs = np.empty((0, bulk.local_size), dtype=np.int64)
            self.surf_dofs = np.empty((0, surf.local_size), dtype=np.int64)
            return
        mapping = eval_mapping(ctx.deformation, batch.elements, batch.points, batch.times)
        _, self.weights = _surface_geometry(batch, mapping)
        tau = (batch.times - ctx.interval[0]) / ctx.dt
        self.bulk_values, _, _ = eval_basis(bulk, batch.points, tau)
        self.surf_values, _, _ = eval_basis(surf, batch.points, tau)
        elements = batch.elements[self.starts]
        self.bulk_dofs = bulk.dofs(elements)
        self.surf_dofs = surf.dofs(elements) + ctx.space.offset
        counts = np.diff(np.append(self.starts, batch.size))
        self._point_segment = np.repeat(np.arange(len(self.starts)), counts)

    @property
    def size(self) -> int:
        return len(self.weights)

    @cached_property
    def dofs(self) -> np.ndarray:
        return np.concatenate([self.bulk_dofs, self.surf_dofs], axis=1)

    def point_dofs(self) -> np.ndarray:
        return self.dofs[self._point_segment]

    def traces(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """:return: (u_B, u_S) at the surface points"""
        seg = self._point_segment
        u_bulk = np.einsum("mi,mi->m", self.bulk_values, u[self.bulk_dofs][seg])
        u_surf = np.einsum("mi,mi->m", self.surf_values, u[self.surf_dofs][seg])
        return u_bulk, u_surf

    def gram(self, left: np.ndarray, right: np.ndarray, weights: np.ndarray) -> sp.csr_matrix:
        """sum_q weights left_i right_j per element; left/right are (M, n_bulk + n_surf)"""
        out = Triplets()
        if not self.size:
            return out.to_matrix(self.n_dofs)
        n_local = left.shape[1] * right.shape[1]
        step = _chunk_points(n_local)
        bounds = list(self.starts) + [self.size]
        first = 0
        while first < len(self.starts):
            last = first + 1
            while last < len(self.starts) and bounds[last] - bounds[first] < step:
                last += 1
            lo, hi = bounds[first], bounds[last]
            local = np.einsum("mi,mj->mij", left[lo:hi] * weights[lo:hi, None], right[lo:hi])
            local = np.add.reduceat(local, self.starts[first:last] - lo, axis=0)
            dofs = self.dofs[first:last]
            out.add_local(dofs, dofs, local)
            first = last
        return out.to_matrix(self.n_dofs)

    def load(self, test: np.ndarray, weights: np.ndarray) -> np.ndarray:
        """sum_q weights test_i scattered to the global dofs"""
        if not self.size:
            return np.zeros(self.n_dofs)
        return np.bincount(
            self.point_dofs().ravel(), weights=(test * weights[:, None]).ravel(), minlength=self.n_dofs
        )


def _henry_combination(pairs: _SurfacePairs, params: ModelParams) -> np.ndarray:
    return np.concatenate([params.b_B * pairs.bulk_values, -params.b_S * pairs.surf_values], axis=1)


def _langmuir_test(pairs: _SurfacePairs, params: ModelParams) -> np.ndarray:
    return np.concatenate([-params.b_B * pairs.bulk_values, params.b_S * pairs.surf_values], axis=1)


def _langmuir_terms(
    pairs: _SurfacePairs, params: ModelParams, state: np.ndarray, with_derivative: bool = True
) -> tuple[Optional[sp.csr_matrix], np.ndarray]:
    """b_BS (u_B u_S, b_S v_S - b_B v_B) and its derivative at state"""
    u_bulk, u_surf = pairs.traces(state)
    test = _langmuir_test(pairs, params)
    weights = params.b_BS * pairs.weights
    residual = pairs.load(test, weights * u_bulk * u_surf)
    if not with_derivative:
        return None, residual
    trial = np.concatenate([pairs.bulk_values * u_surf[:, None], pairs.surf_values * u_bulk[:, None]], axis=1)
    return pairs.gram(test, trial, weights), residual


def assemble_coupling(
    ctx: SlabContext, params: ModelParams, state: Optional[np.ndarray] = None, pairs: Optional[_SurfacePairs] = None
) -> tuple[sp.csr_matrix, np.ndarray]:
    """
    Exchange terms on the mapped surface

    :param ctx: Slab data
    :param params: Model parameters
    :param state: Linearisation point u*; ignored if b_BS = 0
    :return: (Henry matrix plus the Langmuir derivative at u*, Langmuir residual part at u*)
    """
    if pairs is None:
        pairs = _SurfacePairs(ctx)
    henry = _henry_combination(pairs, params)
    matrix = pairs.gram(henry, henry, pairs.weights)
    if state is None or params.b_BS == 0.0 or not pairs.size:
        return matrix, np.zeros(ctx.n_dofs)
    derivative, residual = _langmuir_terms(pairs, params, state)
    return matrix + derivative, residual


def assemble_ghost_penalty(ctx: SlabContext, params: ModelParams) -> sp.csr_matrix:
    """
    Direct ghost penalty on the facet patches of F_n: volumetric jumps between an element's own
    polynomial and the extension of its neighbour's, on both patch elements, scaled by
    gamma_B / h^2 (1 + dt / h).
    """
    mesh = ctx.mesh
    space = ctx.space.bulk
    facets = ctx.active.facets
    if not len(facets) or params.gamma_B == 0.0:
        return sp.csr_matrix((ctx.n_dofs, ctx.n_dofs))

    first, second = mesh.facet_elements[facets, 0], mesh.facet_elements[facets, 1]
    points, weights = triangle_rule(2 * space.k_s)
    nq = len(points)

    def foreign(own: np.ndarray, other: np.ndarray) -> np.ndarray:
        phys = mesh.x0[own][:, None, :] + np.einsum("fab,qb->fqa", mesh.B[own], points)
        return np.einsum("fab,fqb->fqa", mesh.Binv[other], phys - mesh.x0[other][:, None, :])

    own_values = space.spatial.eval(points)
    nf, nl = len(facets), space.spatial.size
    gram = np.zeros((nf, 2 * nl, 2 * nl))
    # jump = u_first - u_second, both read as polynomials at points of the own element
    for own, other, own_is_first in ((first, second, True), (second, first, False)):
        ext = space.spatial.eval(foreign(own, other).reshape(-1, 2)).reshape(nf, nq, nl)
        own_part = np.broadcast_to(own_values, (nf, nq, nl))
        pair = (own_part, ext) if own_is_first else (ext, own_part)
        jump = np.concatenate([pair[0], -pair[1]], axis=2)
        scale = weights[None, :] * np.abs(mesh.detB[own])[:, None]
        gram += np.einsum("fq,fqi,fqj->fij", scale, jump, jump)

    time_mass = ctx.dt * lobatto_basis(space.n_time).mass()
    local = np.einsum("fij,ab->fiajb", gram, time_mass).reshape(nf, 2 * nl * space.n_time, -1)
    local *= params.gamma_B / mesh.h**2 * (1.0 + ctx.dt / mesh.h)
    dofs = np.concatenate([space.dofs(first), space.dofs(second)], axis=1)
    out = Triplets()
    out.add_local(dofs, dofs, local)
    return out.to_matrix(ctx.n_dofs)


def assemble_normal_grad_stab(ctx: SlabContext, params: ModelParams) -> sp.csr_matrix:
    """gamma_S (n_h . grad u, n_h . grad v) over the whole mapped E_G elements"""
    if params.gamma_S == 0.0 or not len(ctx.active.surface):
        return sp.csr_matrix((ctx.n_dofs, ctx.n_dofs))

    def kernel(chunk: QuadBatch, v: MappedBasis, u: MappedBasis) -> np.ndarray:
        mapping = v.mapping
        grad_lin = ctx.slab_phi.element_gradients(chunk.elements, chunk.times)
        size = np.linalg.norm(grad_lin, axis=1)
        n_lin = grad_lin / np.where(size > 0.0, size, 1.0)[:, None]
        normals, _ = transform_normals(mapping, n_lin)
        dn_u = np.einsum("mjd,md->mj", u.grads, normals)
        dn_v = np.einsum("mid,md->mi", v.grads, normals)
        scale = params.gamma_S * chunk.weights * mapping.detJ
        return np.einsum("mi,mj->mij", dn_v, dn_u) * scale[:, None, None]

    return _matrix_from_batch(ctx, ctx.stabilised, kernel, True, True)


def assemble_sources(ctx: SlabContext, params: ModelParams) -> np.ndarray:
    """
    b_B (f_B, v_B) + b_S (f_S, v_S), plus the interface flux mismatch b_B (h_G, v_B) on the
    surface and the natural outer boundary flux b_B (k_B grad u_B . nu, v_B).
    """
    out = np.zeros(ctx.n_dofs)

    if params.f_B is not None and ctx.volume.size:

        def bulk_kernel(chunk: QuadBatch, v: MappedBasis) -> np.ndarray:
            f = params.f_B(v.mapping.x, chunk.times)
            return v.values * (params.b_B * chunk.weights * v.mapping.detJ * f)[:, None]

        out += _vector_from_batch(ctx, ctx.volume, bulk_kernel, False)

    if params.f_S is not None and ctx.surface.size:

        def surface_kernel(chunk: QuadBatch, v: MappedBasis) -> np.ndarray:
            _, weights = _surface_geometry(chunk, v.mapping)
            return v.values * (params.b_S * weights * params.f_S(v.mapping.x, chunk.times))[:, None]

        out += _vector_from_batch(ctx, ctx.surface, surface_kernel, True)

    if params.interface_source is not None and ctx.surface.size:

        def mismatch_kernel(chunk: QuadBatch, v: MappedBasis) -> np.ndarray:
            _, weights = _surface_geometry(chunk, v.mapping)
            h = params.interface_source(v.mapping.x, chunk.times)
            return v.values * (params.b_B * weights * h)[:, None]

        out += _vector_from_batch(ctx, ctx.surface, mismatch_kernel, False)

    if params.boundary_flux is not None and ctx.boundary.size:

        def boundary_kernel(chunk: QuadBatch, v: MappedBasis) -> np.ndarray:
            mapping = v.mapping
            normals, _ = transform_normals(mapping, chunk.normals)
            tangents = np.column_stack([-chunk.normals[:, 1], chunk.normals[:, 0]])
            stretch = np.linalg.norm(np.einsum("mcd,md->mc", mapping.J, tangents), axis=1)
            flux = np.einsum("md,md->m", params.boundary_flux(mapping.x, chunk.times), normals)
            return v.values * (params.b_B * chunk.weights * stretch * flux)[:, None]

        out += _vector_from_batch(ctx, ctx.boundary, boundary_kernel, False)

    return out


class SlabSystem:
    """
    Residual F(u) = A u - rhs + N(u) of a slab and its exact derivative A + N'(u). A and rhs hold
    every linear term; N is the Langmuir product, absent for b_BS = 0.
    """

    def __init__(self, ctx: SlabContext, params: ModelParams, model: Model, incoming: IncomingTrace):
        self.ctx = ctx
        self.params = params
        self.model = model
        self._pairs = _SurfacePairs(ctx)

        upwind, f_upw = assemble_upwind(ctx, params, incoming)
        coupling, _ = assemble_coupling(ctx, params, pairs=self._pairs)
        self.matrix = (
            params.b_B * assemble_bulk_form(ctx, params)
            + params.b_S * assemble_surface_form(ctx, params)
            + upwind
            + assemble_ghost_penalty(ctx, params)
            + assemble_normal_grad_stab(ctx, params)
            + coupling
        ).tocsr()
        self.rhs = f_upw + assemble_sources(ctx, params)

    @property
    def n_dofs(self) -> int:
        return self.ctx.n_dofs

    @property
    def is_linear(self) -> bool:
        return self.model is Model.HENRY or self.params.b_BS == 0.0

    def residual(self, state: np.ndarray) -> np.ndarray:
        out = self.matrix @ state - self.rhs
        if not self.is_linear and self._pairs.size:
            _, nonlinear = _langmuir_terms(self._pairs, self.params, state, with_derivative=False)
            out += nonlinear
        return out

    def jacobian(self, state: np.ndarray) -> sp.csr_matrix:
        if self.is_linear or not self._pairs.size:
            return self.matrix
        derivative, _ = _langmuir_terms(self._pairs, self.params, state)
        return (self.matrix + derivative).tocsr()


def assemble_slab_system(
    ctx: SlabContext,
    params: ModelParams,
    model: Model,
    incoming: IncomingTrace,
    state: Optional[np.ndarray] = None,
) -> tuple[sp.csr_matrix, np.ndarray]:
    """
    :return: HENRY: (A, rhs). LANGMUIR: (DF(u*), F(u*)) at state u* (zero if None).
    """
    system = SlabSystem(ctx, params, model, incoming)
    if model is Model.HENRY:
        return system.matrix, system.rhs
    if state is None:
        state = np.zeros(system.n_dofs)
    return system.jacobian(state), system.residual(state)


def write_triplets(matrix: sp.spmatrix, path: Path) -> None:
    """One 'row col value' line per stored entry"""
    coo = sp.coo_matrix(matrix)
    with path.open("wt", encoding="utf-8") as fout:
        print(f"# {coo.shape[0]} {coo.shape[1]} {coo.nnz}", file=fout)
        for r, c, v in zip(coo.row, coo.col, coo.data):
            print(f"{r} {c} {v!r}", file=fout)
