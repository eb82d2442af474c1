import numpy as np
import pytest

from stfem.isoparam import SlabDeformation
from stfem.levelset import LevelsetField, classify_slab, interpolate_slab_levelset
from stfem.mesh import build_lagrange_nodes, build_structured_mesh
from stfem.spaces import (
    Component,
    DiscreteFunction,
    InactiveElement,
    build_coupled_space,
    build_space,
    eval_basis,
    interpolate,
    mapped_eval,
)


@pytest.mark.parametrize(
    "k_s, k_t, elements, expected",
    [
        (1, 1, [0], 6),
        (1, 1, [0, 1], 8),
        (2, 3, [0], 24),
        (2, 0, [0, 1], 9),
    ],
)
def test_dof_counts(k_s: int, k_t: int, elements: list[int], expected: int):
    mesh = build_structured_mesh(1.0)
    space = build_space(build_lagrange_nodes(mesh, k_s), np.array(elements), k_t)
    assert space.n_dofs == expected
    assert space.element_dofs.shape == (len(elements), space.local_size)


def test_shared_dofs_agree():
    mesh = build_structured_mesh(1.0)
    space = build_space(build_lagrange_nodes(mesh, 2), np.array([0, 1]), 1)
    first, second = (set(row.tolist()) for row in space.dofs([0, 1]))
    # the diagonal carries three P2 nodes, two time nodes each
    assert len(first & second) == 6


def test_negative_time_order():
    mesh = build_structured_mesh(1.0)
    with pytest.raises(ValueError):
        build_space(build_lagrange_nodes(mesh, 1), np.array([0]), -1)


def test_inactive_element():
    mesh = build_structured_mesh(0.5)
    space = build_space(build_lagrange_nodes(mesh, 1), np.array([0, 1, 2]), 1)
    assert space.active_mask([0, 5]).tolist() == [True, False]
    with pytest.raises(InactiveElement):
        space.dofs([1, 5])
    with pytest.raises(InactiveElement):
        DiscreteFunction(np.zeros(space.n_dofs), space).evaluate(5, np.array([[0.2, 0.2]]), 0.5)


@pytest.mark.parametrize("k_s, k_t", [(1, 1), (2, 2), (3, 1)])
def test_partition_of_unity(k_s: int, k_t: int):
    mesh = build_structured_mesh(1.0)
    space = build_space(build_lagrange_nodes(mesh, k_s), np.array([0]), k_t)
    rng = np.random.default_rng(0)
    xi = rng.dirichlet([1.0, 1.0, 1.0], 12)[:, 1:]
    values, grads, dtau = eval_basis(space, xi, rng.uniform(0.0, 1.0, 12))
    assert values.sum(axis=1) == pytest.approx(np.ones(12))
    assert grads.sum(axis=1) == pytest.approx(np.zeros((12, 2)), abs=1e-10)
    assert dtau.sum(axis=1) == pytest.approx(np.zeros(12), abs=1e-10)


@pytest.mark.parametrize("k_s, k_t", [(1, 1), (2, 1), (3, 2)])
def test_interpolation_reproduces_polynomials(k_s: int, k_t: int):
    mesh = build_structured_mesh(0.5)
    interval = (0.25, 0.5)
    space = build_space(build_lagrange_nodes(mesh, k_s), np.arange(mesh.n_elements), k_t, interval)

    def func(x, t):
        return 0.3 + x[:, 0] ** k_s - 2.0 * x[:, 0] * x[:, 1] ** (k_s - 1) + (1.0 + x[:, 1]) * t**k_t

    u = DiscreteFunction(interpolate(space, func), space)
    rng = np.random.default_rng(1)
    elements = rng.integers(0, mesh.n_elements, 20)
    xi = rng.dirichlet([1.0, 1.0, 1.0], 20)[:, 1:]
    tau = rng.uniform(0.0, 1.0, 20)
    x = mesh.to_physical(elements, xi)
    t = interval[0] + (interval[1] - interval[0]) * tau
    assert u.evaluate(elements, xi, tau) == pytest.approx(func(x, t), abs=1e-12)


def test_mapped_eval_with_identity():
    mesh = build_structured_mesh(0.5)
    interval = (0.0, 0.5)
    space = build_space(build_lagrange_nodes(mesh, 2), np.arange(mesh.n_elements), 1, interval)
    u = DiscreteFunction(interpolate(space, lambda x, t: x[:, 0] ** 2 + 3.0 * x[:, 1] * t), space)
    deformation = SlabDeformation.identity(mesh, interval)
    xi = np.array([[0.2, 0.3], [0.6, 0.1]])
    elements = np.array([2, 5])
    x = mesh.to_physical(elements, xi)
    values, grads = u.evaluate_mapped(deformation, elements, xi, 0.4)
    assert values == pytest.approx(x[:, 0] ** 2 + 1.2 * x[:, 1])
    assert grads == pytest.approx(np.column_stack([2 * x[:, 0], np.full(2, 1.2)]))
    basis = mapped_eval(space, deformation, elements, xi, 0.4)
    coeffs = u.coefficients[space.dofs(elements)]
    assert np.einsum("mi,mi->m", basis.dt, coeffs) == pytest.approx(3.0 * x[:, 1])


def test_coupled_space_and_parts():
    mesh = build_structured_mesh(0.25)
    slab = interpolate_slab_levelset(LevelsetField.planar((1.0, 0.0), 0.45), mesh, (0.0, 0.25), 1)
    active = classify_slab(slab)
    space = build_coupled_space(active, mesh, 1, 1, (0.0, 0.25))
    # bulk: 3 columns of 5 vertices, surface: 2 columns, two time nodes each
    assert space.bulk.n_dofs == 30
    assert space.surf.n_dofs == 20
    coefficients = np.arange(space.n_dofs, dtype=float)
    u = DiscreteFunction.coupled(coefficients, space)
    assert u.bulk.coefficients == pytest.approx(coefficients[:30])
    assert u.surface.coefficients == pytest.approx(coefficients[30:])
    assert u.part(Component.COUPLED) is u
    assert u.bulk.part(Component.BULK).component is Component.BULK
    with pytest.raises(ValueError):
        u.bulk.part(Component.SURFACE)
    with pytest.raises(ValueError):
        DiscreteFunction(np.zeros(3), space.bulk)
    with pytest.raises(ValueError):
        build_coupled_space(active, mesh, 2, 1, nodes=build_lagrange_nodes(mesh, 1))


def test_nodal_trace():
    mesh = build_structured_mesh(1.0)
    space = build_space(build_lagrange_nodes(mesh, 1), np.array([0, 1]), 2, (0.0, 1.0))
    u = DiscreteFunction(interpolate(space, lambda x, t: x[:, 0] + t**2), space)
    assert u.nodal().shape == (4, 3)
    assert u.nodal_trace(1.0) == pytest.approx(space.node_coords[:, 0] + 1.0)
    assert u.nodal_trace(0.5) == pytest.approx(space.node_coords[:, 0] + 0.25)
