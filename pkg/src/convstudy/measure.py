# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.
"""Final-time L2 errors and measures of the mapped discrete domain."""
from __future__ import annotations

import math
from typing import Optional

import numpy as np

from stfem.assembly import PointField, SlabContext
from stfem.isoparam import eval_mapping, transform_normals
from stfem.quadrature import QuadBatch, QuadTag, slice_batch
from stfem.solver import SlabSolution
from stfem.spaces import DiscreteFunction

__all__ = ["final_slices", "slice_weights", "l2_error", "compute_final_errors", "mapped_measures"]


def final_slices(ctx: SlabContext, t_star: Optional[float] = None) -> tuple[QuadBatch, QuadBatch]:
    """:return: (volume slice, interface slice) of the slab at t_star, default its end time"""
    if t_star is None:
        t_star = ctx.interval[1]
    volume = slice_batch(ctx.slab_phi, ctx.active.bulk, t_star, QuadTag.SLICE_VOL, ctx.order_s)
    interface = slice_batch(ctx.slab_phi, ctx.active.surface, t_star, QuadTag.SLICE_IF, ctx.order_s)
    return volume, interface


def slice_weights(ctx: SlabContext, batch: QuadBatch, surface: bool) -> tuple[np.ndarray, np.ndarray]:
    """:return: (mapped points, weights in the mapped measure)"""
    mapping = eval_mapping(ctx.deformation, batch.elements, batch.points, batch.times)
    if surface:
        _, factors = transform_normals(mapping, batch.normals)
        return mapping.x, batch.weights * factors
    return mapping.x, batch.weights * mapping.detJ


def l2_error(ctx: SlabContext, batch: QuadBatch, part: DiscreteFunction, exact: PointField, surface: bool) -> float:
    """L2 norm of part - exact over a slice batch of the end time (tau = 1)"""
    if not batch.size:
        return 0.0
    x, weights = slice_weights(ctx, batch, surface)
    tau = (batch.times - ctx.interval[0]) / ctx.dt
    discrete = part.evaluate(batch.elements, batch.points, tau[0])
    diff = discrete - np.asarray(exact(x, batch.times), dtype=float)
    return math.sqrt(max(float(np.sum(weights * diff**2)), 0.0))


def compute_final_errors(
    solution: SlabSolution, exact_bulk: PointField, exact_surface: PointField
) -> tuple[float, float]:
    """
    L2 errors on the mapped bulk domain and interface at the end of the last slab

    :param solution: The last slab
    :param exact_bulk: u_B
    :param exact_surface: u_S
    :return: (err_bulk, err_surf)
    """
    ctx = solution.context
    volume, interface = final_slices(ctx)
    err_bulk = l2_error(ctx, volume, solution.function.bulk, exact_bulk, surface=False)
    err_surf = l2_error(ctx, interface, solution.function.surface, exact_surface, surface=True)
    return err_bulk, err_surf


def mapped_measures(ctx: SlabContext, t_star: Optional[float] = None) -> tuple[float, float]:
    """:return: (area of the mapped bulk domain, length of the mapped interface) at t_star"""
    if t_star is None:
        t_star = ctx.interval[0]
    volume, interface = final_slices(ctx, t_star)
    area = float(np.sum(slice_weights(ctx, volume, False)[1])) if volume.size else 0.0
    length = float(np.sum(slice_weights(ctx, interface, True)[1])) if interface.size else 0.0
    return area, length
