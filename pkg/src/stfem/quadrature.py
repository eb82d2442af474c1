# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.
"""
Quadrature on cut triangles, iterated in time over a slab.

Per-element rules (cut_triangle_rule, slab_*_rule, slice_rule) return a QuadRule. Assembly
works on QuadBatch objects instead: the rules of many elements stacked into flat arrays,
contiguous per element, with an element id per point.

Points are always reference coordinates on the unit triangle. Weights are measured in the
background (undeformed) element: the isoparametric factors are applied by the caller.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Optional

import numpy as np

from stfem.basis import REF_VERTICES, gauss_legendre, segment_points, triangle_rule
from stfem.levelset import ZERO_TOL, SlabLevelsetLin, perturb_degenerate
from stfem.mesh import BackgroundMesh

__all__ = [
    "QuadTag",
    "QuadRule",
    "QuadBatch",
    "DegenerateCut",
    "cut_triangle_rule",
    "slab_volume_rule",
    "slab_surface_rule",
    "slice_rule",
    "volume_batch",
    "surface_batch",
    "slice_batch",
    "element_batch",
    "boundary_batch",
]


class QuadTag(IntEnum):
    VOL_NEG = 1
    INTERFACE = 2
    SLICE_VOL = 3
    SLICE_IF = 4
    PATCH = 5
    BOUNDARY = 6


class DegenerateCut(ValueError):
    """Raised if all three vertex values of a triangle vanish"""

    pass


@dataclass(frozen=True, eq=False)
class QuadRule:
    """
    :ivar points: Reference points, shape (m, 2)
    :ivar weights: Positive weights, shape (m,)
    :ivar tag: What the rule integrates over
    :ivar times: Absolute times of space-time rules, shape (m,)
    :ivar normals: Unit normals of interface rules (pointing into {phi < 0}), shape (m, 2)
    """

    points: np.ndarray
    weights: np.ndarray
    tag: QuadTag
    times: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return len(self.weights)

    @property
    def total(self) -> float:
        return float(self.weights.sum())


def _empty_rule(tag: QuadTag, with_times: bool = False) -> QuadRule:
    with_normals = tag in (QuadTag.INTERFACE, QuadTag.SLICE_IF)
    return QuadRule(
        points=np.empty((0, 2)),
        weights=np.empty(0),
        tag=tag,
        times=np.empty(0) if with_times else None,
        normals=np.empty((0, 2)) if with_normals else None,
    )


def _crossings(phis: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Walks the reference edges, returning the negative polygon (CCW) and the zero crossings."""
    polygon = []
    crossings = []
    for i in range(3):
        j = (i + 1) % 3
        if phis[i] < 0.0:
            polygon.append(REF_VERTICES[i])
        if (phis[i] < 0.0) != (phis[j] < 0.0):
            s = phis[i] / (phis[i] - phis[j])
            point = REF_VERTICES[i] + s * (REF_VERTICES[j] - REF_VERTICES[i])
            polygon.append(point)
            crossings.append(point)
    return polygon, crossings


def cut_triangle_rule(
    vertex_phis: Iterable[float], tag: QuadTag, order: int, jacobian: Optional[np.ndarray] = None
) -> QuadRule:
    """
    Quadrature on the negative part, or along the zero line, of the linear interpolant of
    vertex_phis on the reference triangle

    :param vertex_phis: Level set values at the three reference vertices
    :param tag: VOL_NEG or INTERFACE
    :param order: Polynomial degree integrated exactly
    :param jacobian: Affine Jacobian of the element; weights and normals then refer to the image
        of the reference triangle (identity if None)
    :return: The rule
    """
    if order < 1:
        raise ValueError(f"Order must be >= 1, got {order}")
    phis = np.asarray(list(vertex_phis), dtype=float)
    if np.all(np.abs(phis) < ZERO_TOL):
        raise DegenerateCut(f"Vertex values {phis} all vanish")
    phis = perturb_degenerate(phis)
    jac = np.eye(2) if jacobian is None else np.asarray(jacobian, dtype=float)
    neg = phis < 0.0

    if tag == QuadTag.VOL_NEG:
        if not neg.any():
            return _empty_rule(tag)
        ref_points, ref_weights = triangle_rule(order)
        scale = abs(np.linalg.det(jac))
        if neg.all():
            return QuadRule(ref_points.copy(), ref_weights * scale, tag)
        polygon, _ = _crossings(phis)
        points, weights = [], []
        for k in range(1, len(polygon) - 1):
            p0, p1, p2 = polygon[0], polygon[k], polygon[k + 1]
            sub = np.column_stack([p1 - p0, p2 - p0])
            points.append(p0 + ref_points @ sub.T)
            weights.append(ref_weights * abs(np.linalg.det(sub)) * scale)
        return QuadRule(np.concatenate(points), np.concatenate(weights), tag)

    if tag == QuadTag.INTERFACE:
        if neg.all() or not neg.any():
            return _empty_rule(tag)
        _, (a, b) = _crossings(phis)
        s, ws = gauss_legendre(segment_points(order))
        grad = np.linalg.solve(jac.T, np.array([phis[1] - phis[0], phis[2] - phis[0]]))
        normal = -grad / np.linalg.norm(grad)
        return QuadRule(
            points=a + s[:, None] * (b - a),
            weights=ws * np.linalg.norm(jac @ (b - a)),
            tag=tag,
            normals=np.tile(normal, (len(s), 1)),
        )

    raise ValueError(f"cut_triangle_rule does not produce {tag!r} rules")


def _time_rule(slab_phi: SlabLevelsetLin, order_t: int) -> tuple[np.ndarray, np.ndarray]:
    tq, wq = gauss_legendre(order_t)
    return slab_phi.interval[0] + slab_phi.dt * tq, slab_phi.dt * wq


def _iterated(
    values: np.ndarray, times: np.ndarray, time_weights: np.ndarray, jac: np.ndarray, tag: QuadTag, order_s: int
) -> QuadRule:
    """values: vertex values per time node, shape (3, len(times))"""
    rules = [cut_triangle_rule(values[:, j], tag, order_s, jac) for j in range(len(times))]
    kept = [(j, r) for j, r in enumerate(rules) if r.size]
    if not kept:
        return _empty_rule(tag, with_times=True)
    return QuadRule(
        points=np.concatenate([r.points for _, r in kept]),
        weights=np.concatenate([r.weights * time_weights[j] for j, r in kept]),
        tag=tag,
        times=np.concatenate([np.full(r.size, times[j]) for j, r in kept]),
        normals=np.concatenate([r.normals for _, r in kept]) if tag == QuadTag.INTERFACE else None,
    )


def _element_time_values(slab_phi: SlabLevelsetLin, element: int, times: np.ndarray) -> np.ndarray:
    return slab_phi.vertex_values(times)[slab_phi.mesh.elements[element]]


def slab_volume_rule(element: int, slab_phi: SlabLevelsetLin, order_s: int, order_t: int) -> QuadRule:
    """Iterated rule for the space-time integral over the negative part of one element."""
    times, tw = _time_rule(slab_phi, order_t)
    values = _element_time_values(slab_phi, element, times)
    return _iterated(values, times, tw, slab_phi.mesh.B[element], QuadTag.VOL_NEG, order_s)


def slab_surface_rule(element: int, slab_phi: SlabLevelsetLin, order_s: int, order_t: int) -> QuadRule:
    """Iterated rule for the space-time integral along the zero line of one element."""
    times, tw = _time_rule(slab_phi, order_t)
    values = _element_time_values(slab_phi, element, times)
    return _iterated(values, times, tw, slab_phi.mesh.B[element], QuadTag.INTERFACE, order_s)


def slice_rule(element: int, slab_phi: SlabLevelsetLin, t_star: float, tag: QuadTag, order_s: int) -> QuadRule:
    """Spatial rule at the fixed time t_star; tag is SLICE_VOL or SLICE_IF."""
    base = {QuadTag.SLICE_VOL: QuadTag.VOL_NEG, QuadTag.SLICE_IF: QuadTag.INTERFACE}[tag]
    values = slab_phi.element_values(np.array([element]), t_star)[0]
    rule = cut_triangle_rule(values, base, order_s, slab_phi.mesh.B[element])
    return QuadRule(rule.points, rule.weights, tag, np.full(rule.size, float(t_star)), rule.normals)


@dataclass(frozen=True, eq=False)
class QuadBatch:
    """
    Rules of several elements stacked together; points of one element are contiguous.

    :ivar elements: Element id per point, shape (M,)
    :ivar points: Reference points, shape (M, 2)
    :ivar times: Absolute times, shape (M,)
    :ivar weights: Weights (background measure, time weight included), shape (M,)
    :ivar normals: Unit normals (background frame) for interface and boundary batches
    """

    elements: np.ndarray
    points: np.ndarray
    times: np.ndarray
    weights: np.ndarray
    normals: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return len(self.weights)

    @classmethod
    def empty(cls, with_normals: bool = False) -> QuadBatch:
        return cls(
            np.empty(0, dtype=np.int64),
            np.empty((0, 2)),
            np.empty(0),
            np.empty(0),
            np.empty((0, 2)) if with_normals else None,
        )

    @classmethod
    def concat(cls, batches: list[QuadBatch], with_normals: bool = False) -> QuadBatch:
        batches = [b for b in batches if b.size]
        if not batches:
            return cls.empty(with_normals)
        merged = cls(
            np.concatenate([b.elements for b in batches]),
            np.concatenate([b.points for b in batches]),
            np.concatenate([b.times for b in batches]),
            np.concatenate([b.weights for b in batches]),
            np.concatenate([b.normals for b in batches]) if with_normals else None,
        )
        order = np.argsort(merged.elements, kind="stable")
        return merged.take(order)

    @classmethod
    def from_rule(cls, element: int, rule: QuadRule, time: Optional[float] = None) -> QuadBatch:
        times = rule.times if rule.times is not None else np.full(rule.size, time)
        return cls(np.full(rule.size, element, dtype=np.int64), rule.points, times, rule.weights, rule.normals)

    def take(self, index) -> QuadBatch:
        return QuadBatch(
            self.elements[index],
            self.points[index],
            self.times[index],
            self.weights[index],
            None if self.normals is None else self.normals[index],
        )

    def segment_starts(self) -> np.ndarray:
        """Start offsets of the per-element blocks"""
        if not self.size:
            return np.empty(0, dtype=np.int64)
        change = np.flatnonzero(self.elements[1:] != self.elements[:-1]) + 1
        return np.concatenate([[0], change])

    def chunks(self, max_points: int) -> Iterable[QuadBatch]:
        """Splits at element boundaries into batches of roughly max_points points"""
        starts = self.segment_starts()
        if not len(starts):
            return
        begin = 0
        for s in starts[1:]:
            if s - begin >= max_points:
                yield self.take(slice(begin, s))
                begin = s
        yield self.take(slice(begin, self.size))


def _tensor_batch(
    mesh: BackgroundMesh, elements: np.ndarray, times: np.ndarray, time_weights: np.ndarray, order_s: int
) -> QuadBatch:
    pts, wts = triangle_rule(order_s)
    nt, ms = len(times), len(pts)
    one_points = np.tile(pts, (nt, 1))
    one_times = np.repeat(times, ms)
    one_weights = np.repeat(time_weights, ms) * np.tile(wts, nt)
    ne = len(elements)
    return QuadBatch(
        elements=np.repeat(elements, nt * ms),
        points=np.tile(one_points, (ne, 1)),
        times=np.tile(one_times, ne),
        weights=(one_weights[None, :] * np.abs(mesh.detB[elements])[:, None]).ravel(),
    )


def volume_batch(slab_phi: SlabLevelsetLin, elements: np.ndarray, order_s: int, order_t: int) -> QuadBatch:
    """Space-time rules over the negative parts of the given elements"""
    mesh = slab_phi.mesh
    elements = np.asarray(elements, dtype=np.int64)
    times, tw = _time_rule(slab_phi, order_t)
    values = perturb_degenerate(slab_phi.vertex_values(times))[mesh.elements[elements]]
    full = np.all(values < 0.0, axis=(1, 2))
    empty = np.all(values > 0.0, axis=(1, 2))
    parts = [_tensor_batch(mesh, elements[full], times, tw, order_s)]
    for idx in np.flatnonzero(~full & ~empty):
        e = int(elements[idx])
        try:
            rule = _iterated(values[idx], times, tw, mesh.B[e], QuadTag.VOL_NEG, order_s)
        except DegenerateCut:
            continue
        parts.append(QuadBatch.from_rule(e, rule))
    return QuadBatch.concat(parts)


def surface_batch(slab_phi: SlabLevelsetLin, elements: np.ndarray, order_s: int, order_t: int) -> QuadBatch:
    """Space-time rules along the zero lines inside the given elements"""
    mesh = slab_phi.mesh
    elements = np.asarray(elements, dtype=np.int64)
    times, tw = _time_rule(slab_phi, order_t)
    values = perturb_degenerate(slab_phi.vertex_values(times))[mesh.elements[elements]]
    cut = ~(np.all(values < 0.0, axis=(1, 2)) | np.all(values > 0.0, axis=(1, 2)))
    parts = []
    for idx in np.flatnonzero(cut):
        e = int(elements[idx])
        try:
            rule = _iterated(values[idx], times, tw, mesh.B[e], QuadTag.INTERFACE, order_s)
        except DegenerateCut:
            continue
        parts.append(QuadBatch.from_rule(e, rule))
    return QuadBatch.concat(parts, with_normals=True)


def slice_batch(
    slab_phi: SlabLevelsetLin, elements: np.ndarray, t_star: float, tag: QuadTag, order_s: int
) -> QuadBatch:
    """Spatial rules at the fixed time t_star over the given elements"""
    mesh = slab_phi.mesh
    elements = np.asarray(elements, dtype=np.int64)
    values = perturb_degenerate(slab_phi.element_values(elements, t_star))
    full = np.all(values < 0.0, axis=1)
    empty = np.all(values > 0.0, axis=1)
    parts = []
    if tag == QuadTag.SLICE_VOL:
        parts.append(_tensor_batch(mesh, elements[full], np.array([float(t_star)]), np.ones(1), order_s))
        base = QuadTag.VOL_NEG
    elif tag == QuadTag.SLICE_IF:
        base = QuadTag.INTERFACE
    else:
        raise ValueError(f"slice_batch does not produce {tag!r} rules")
    for idx in np.flatnonzero(~full & ~empty):
        e = int(elements[idx])
        try:
            rule = cut_triangle_rule(values[idx], base, order_s, mesh.B[e])
        except DegenerateCut:
            continue
        parts.append(QuadBatch.from_rule(e, rule, time=float(t_star)))
    return QuadBatch.concat(parts, with_normals=tag == QuadTag.SLICE_IF)


def element_batch(
    mesh: BackgroundMesh, elements: np.ndarray, interval: tuple[float, float], order_s: int, order_t: int
) -> QuadBatch:
    """Full (uncut) space-time rules over whole elements"""
    tq, wq = gauss_legendre(order_t)
    dt = interval[1] - interval[0]
    return _tensor_batch(mesh, np.asarray(elements, dtype=np.int64), interval[0] + dt * tq, dt * wq, order_s)


def boundary_batch(slab_phi: SlabLevelsetLin, facets: np.ndarray, order_s: int, order_t: int) -> QuadBatch:
    """
    Space-time rules on boundary facets, restricted to their negative parts. Normals are the
    outward normals of the mesh boundary.
    """
    mesh = slab_phi.mesh
    times, tw = _time_rule(slab_phi, order_t)
    s, ws = gauss_legendre(segment_points(order_s))
    vertex_values = perturb_degenerate(slab_phi.vertex_values(times))
    parts = []
    for f in np.asarray(facets, dtype=np.int64):
        e = int(mesh.facet_elements[f, 0])
        local = int(np.flatnonzero(mesh.element_facets[e] == f)[0])
        la, lb = local, (local + 1) % 3
        va, vb = mesh.elements[e, la], mesh.elements[e, lb]
        edge = mesh.vertices[vb] - mesh.vertices[va]
        length = float(np.linalg.norm(edge))
        normal = np.array([edge[1], -edge[0]]) / length
        for j, t in enumerate(times):
            pa, pb = vertex_values[va, j], vertex_values[vb, j]
            if pa > 0.0 and pb > 0.0:
                continue
            lo, hi = 0.0, 1.0
            if pa < 0.0 <= pb:
                hi = pa / (pa - pb)
            elif pb < 0.0 <= pa:
                lo = pa / (pa - pb)
            r = lo + (hi - lo) * s
            points = REF_VERTICES[la][None, :] + r[:, None] * (REF_VERTICES[lb] - REF_VERTICES[la])[None, :]
            parts.append(
                QuadBatch(
                    np.full(len(s), e, dtype=np.int64),
                    points,
                    np.full(len(s), t),
                    ws * (hi - lo) * length * tw[j],
                    np.tile(normal, (len(s), 1)),
                )
            )
    return QuadBatch.concat(parts, with_normals=True)
