import numpy as np
import pytest

from stfem.isoparam import (
    MappingDegenerate,
    MappingEval,
    SlabDeformation,
    build_slab_deformation,
    deformation_times,
    eval_mapping,
    interpolate_ho_levelset,
    transform_normals,
)
from stfem.levelset import LevelsetField, classify_slab, interpolate_slab_levelset
from stfem.mesh import build_lagrange_nodes, build_structured_mesh
from stfem.quadrature import QuadTag, slice_batch


def _circle_deformation(levelset: LevelsetField, h: float, q: int, interval=(0.0, 0.125)):
    mesh = build_structured_mesh(h)
    slab = interpolate_slab_levelset(levelset, mesh, interval, q)
    active = classify_slab(slab)
    nodes = build_lagrange_nodes(mesh, q)
    phi_h = interpolate_ho_levelset(levelset, nodes, deformation_times(interval, q))
    return slab, active, build_slab_deformation(phi_h, slab, active, nodes)


def test_deformation_times_hit_endpoints():
    times = deformation_times((0.1, 0.35), 3)
    assert times[0] == 0.1 and times[-1] == 0.35
    assert np.all(np.diff(times) > 0.0)


def test_identity_mapping():
    mesh = build_structured_mesh(0.5)
    deformation = SlabDeformation.identity(mesh, (0.0, 0.25))
    xi = np.array([[0.2, 0.3], [0.5, 0.1]])
    mapping = eval_mapping(deformation, [3, 5], xi, 0.1)
    assert mapping.x == pytest.approx(mesh.to_physical(np.array([3, 5]), xi))
    assert mapping.J == pytest.approx(np.tile(np.eye(2), (2, 1, 1)))
    assert mapping.V == pytest.approx(np.zeros((2, 2)))
    assert mapping.detJ == pytest.approx([1.0, 1.0])
    assert deformation.is_identity and deformation.q_s == 1


def test_planar_interface_needs_no_displacement():
    mesh = build_structured_mesh(0.25)
    slab = interpolate_slab_levelset(LevelsetField.planar((0.6, 0.8), 0.5, speed=0.3), mesh, (0.0, 0.25), 2)
    active = classify_slab(slab)
    nodes = build_lagrange_nodes(mesh, 2)
    phi_h = interpolate_ho_levelset(
        LevelsetField.planar((0.6, 0.8), 0.5, speed=0.3), nodes, deformation_times((0.0, 0.25), 2)
    )
    deformation = build_slab_deformation(phi_h, slab, active, nodes)
    if not deformation.is_identity:
        assert np.max(np.abs(deformation.displacements)) < 1e-12
    assert deformation.failed_roots == 0


def test_first_order_nodes_give_identity(moving_circle: LevelsetField):
    mesh = build_structured_mesh(0.1)
    slab = interpolate_slab_levelset(moving_circle, mesh, (0.0, 0.125), 1)
    nodes = build_lagrange_nodes(mesh, 1)
    phi_h = interpolate_ho_levelset(moving_circle, nodes, deformation_times((0.0, 0.125), 1))
    assert build_slab_deformation(phi_h, slab, classify_slab(slab), nodes).is_identity


def test_mapping_moves_zero_line_closer(moving_circle: LevelsetField):
    slab, active, deformation = _circle_deformation(moving_circle, 0.1, 2)
    assert not deformation.is_identity
    assert deformation.failed_roots == 0
    for t in deformation.times:
        batch = slice_batch(slab, active.surface, float(t), QuadTag.SLICE_IF, 4)
        x_lin = slab.mesh.to_physical(batch.elements, batch.points)
        mapped = eval_mapping(deformation, batch.elements, batch.points, t)
        before = np.max(np.abs(moving_circle.phi(x_lin, float(t))))
        after = np.max(np.abs(moving_circle.phi(mapped.x, float(t))))
        assert after < 0.5 * before


def test_displacements_are_small(moving_circle: LevelsetField):
    slab, _, deformation = _circle_deformation(moving_circle, 0.1, 3)
    assert deformation.displacements is not None
    assert np.max(np.linalg.norm(deformation.displacements, axis=-1)) <= 0.5 * slab.mesh.h
    outside = ~deformation.support
    assert outside.any()


def test_mapping_derivatives(moving_circle: LevelsetField):
    slab, active, deformation = _circle_deformation(moving_circle, 0.1, 2)
    mesh = slab.mesh
    e = int(np.flatnonzero(deformation.support)[0])
    xi = np.array([[0.3, 0.25]])
    t, eps = 0.06, 1e-6
    mapping = eval_mapping(deformation, e, xi, t)
    later = eval_mapping(deformation, e, xi, t + eps).x
    earlier = eval_mapping(deformation, e, xi, t - eps).x
    assert mapping.V[0] == pytest.approx((later - earlier)[0] / (2 * eps), abs=1e-7)
    for a in range(2):
        step = np.zeros((1, 2))
        step[0, a] = eps
        dx = (eval_mapping(deformation, e, xi + step, t).x - eval_mapping(deformation, e, xi - step, t).x) / (2 * eps)
        assert dx[0] == pytest.approx(mapping.J[0] @ mesh.B[e][:, a], abs=1e-7)


def test_transform_normals():
    mapping = MappingEval(
        x=np.zeros((2, 2)),
        J=np.tile(np.diag([2.0, 1.0]), (2, 1, 1)),
        V=np.zeros((2, 2)),
        detJ=np.array([2.0, 2.0]),
    )
    normals, factors = transform_normals(mapping, np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert normals == pytest.approx(np.eye(2))
    # a vertical line keeps its length, a horizontal one doubles
    assert factors == pytest.approx([1.0, 2.0])


def test_inverted_mapping_is_rejected():
    mesh = build_structured_mesh(0.5)
    nodes = build_lagrange_nodes(mesh, 2)
    flip = np.zeros((2, nodes.n_nodes, 2))
    flip[:, :, 0] = -2.0 * nodes.coords[:, 0]
    deformation = SlabDeformation(mesh, (0.0, 0.25), 1, nodes, flip)
    with pytest.raises(MappingDegenerate):
        eval_mapping(deformation, 1, np.array([[0.2, 0.2]]), 0.1)
