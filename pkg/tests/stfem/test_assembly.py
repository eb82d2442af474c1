import dataclasses

import numpy as np
import pytest
import scipy.sparse as sp

from stfem.assembly import (
    InitialTrace,
    Model,
    SlabSystem,
    SlabTrace,
    SurfaceTransport,
    TransferOutOfDomain,
    Triplets,
    assemble_bulk_form,
    assemble_coupling,
    assemble_ghost_penalty,
    assemble_normal_grad_stab,
    assemble_slab_system,
    assemble_sources,
    assemble_surface_form,
    assemble_upwind,
    write_triplets,
)
from stfem.levelset import LevelsetField
from stfem.mesh import TimePartition, build_structured_mesh
from stfem.solver import MarchConfig, MarchProblem, build_slab_context, initial_guess
from stfem.spaces import DiscreteFunction, interpolate


def _context(problem, k: int = 1, n: int = 1):
    return build_slab_context(problem, MarchConfig.for_order(k), n)


def _bulk_vector(ctx, bulk: np.ndarray) -> np.ndarray:
    return np.concatenate([bulk, np.zeros(ctx.space.surf.n_dofs)])


def _surface_vector(ctx, surf: np.ndarray) -> np.ndarray:
    return np.concatenate([np.zeros(ctx.space.bulk.n_dofs), surf])


def _assert_psd(matrix: sp.spmatrix):
    dense = matrix.toarray()
    assert dense == pytest.approx(dense.T, abs=1e-12 * max(1.0, np.abs(dense).max()))
    eigs = np.linalg.eigvalsh(0.5 * (dense + dense.T))
    assert eigs.min() >= -1e-10 * max(1.0, eigs.max())


def test_triplets_sum_duplicates(tmp_path):
    out = Triplets()
    out.add_local(np.array([[0, 1]]), np.array([[0, 1]]), np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    out.add_local(np.array([[1, 2]]), np.array([[1, 2]]), np.array([[[1.0, 0.0], [0.0, 5.0]]]))
    matrix = out.to_matrix(3)
    assert matrix.toarray() == pytest.approx(np.array([[1.0, 2.0, 0.0], [3.0, 5.0, 0.0], [0.0, 0.0, 5.0]]))
    assert Triplets().to_matrix(4).nnz == 0

    path = tmp_path / "matrix.txt"
    write_triplets(matrix, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "# 3 3 5"
    assert len(lines) == 6


def test_invalid_params(make_problem):
    with pytest.raises(ValueError):
        make_problem(k_B=0.0)
    with pytest.raises(ValueError):
        make_problem(gamma_S=-1.0)


@pytest.mark.parametrize("k", [1, 2])
def test_forms_vanish_on_constants(make_problem, k: int):
    ctx = _context(make_problem(), k)
    ones_bulk = _bulk_vector(ctx, np.ones(ctx.space.bulk.n_dofs))
    ones_surf = _surface_vector(ctx, np.ones(ctx.space.surf.n_dofs))
    params = make_problem().params
    assert np.abs(assemble_bulk_form(ctx, params) @ ones_bulk).max() < 1e-12
    # div_G w vanishes for a rigid rotation, whatever the discrete normal
    assert np.abs(assemble_surface_form(ctx, params) @ ones_surf).max() < 1e-12
    assert np.abs(assemble_ghost_penalty(ctx, params) @ ones_bulk).max() < 1e-10
    assert np.abs(assemble_normal_grad_stab(ctx, params) @ ones_surf).max() < 1e-10


@pytest.mark.parametrize("k", [1, 2])
def test_surface_transport_follows_the_interface(make_problem, k: int):
    # vertical line x = 0.3 + 0.2 t crossed by a constant w = (0.5, 0.1)
    params = dataclasses.replace(
        make_problem().params,
        velocity=lambda x, t: np.tile([0.5, 0.1], (len(x), 1)),
        velocity_grad=lambda x, t: np.zeros((len(x), 2, 2)),
    )
    problem = MarchProblem(
        LevelsetField.planar((1.0, 0.0), 0.3, speed=0.2),
        params,
        Model.HENRY,
        build_structured_mesh(0.125),
        TimePartition.from_step(0.25, 0.25),
    )
    ctx = _context(problem, k)
    u = _surface_vector(ctx, interpolate(ctx.space.surf, lambda x, t: x[:, 0]))
    surf_rows = slice(ctx.space.bulk.n_dofs, None)
    # d/dt + w . grad of u = x along the moving line is its speed 0.2, over length 1 and duration 0.25
    interface = assemble_surface_form(ctx, params) @ u
    assert interface[surf_rows].sum() == pytest.approx(0.2 * 0.25, rel=1e-8)
    # the material form sees the full normal component of w instead
    material = assemble_surface_form(ctx, dataclasses.replace(params, transport=SurfaceTransport.MATERIAL)) @ u
    assert material[surf_rows].sum() == pytest.approx(0.5 * 0.25, rel=1e-8)


def test_bulk_diffusion_is_positive(make_problem):
    problem = make_problem()
    ctx = _context(problem)
    zero_velocity = dataclasses.replace(problem.params, velocity=lambda x, t: np.zeros((len(x), 2)))
    matrix = assemble_bulk_form(ctx, zero_velocity)
    bulk = ctx.space.bulk
    u = _bulk_vector(ctx, interpolate(bulk, lambda x, t: np.sin(3.0 * x[:, 0]) * np.ones_like(t)))
    # time-constant u: only the diffusion part remains
    assert u @ (matrix @ u) > 0.0


@pytest.mark.parametrize("k", [1, 2])
def test_ghost_penalty(make_problem, k: int):
    ctx = _context(make_problem(), k)
    matrix = assemble_ghost_penalty(ctx, make_problem().params)
    assert matrix.nnz > 0
    _assert_psd(matrix)
    bulk = ctx.space.bulk
    polynomial = interpolate(bulk, lambda x, t: 1.0 + 2.0 * x[:, 0] ** k - x[:, 1] + t)
    assert np.abs(matrix @ _bulk_vector(ctx, polynomial)).max() < 1e-10
    off = dataclasses.replace(make_problem().params, gamma_B=0.0)
    assert assemble_ghost_penalty(ctx, off).nnz == 0


def test_normal_gradient_stabilisation(make_problem):
    ctx = _context(make_problem(), 2)
    matrix = assemble_normal_grad_stab(ctx, make_problem().params)
    _assert_psd(matrix)
    assert matrix[: ctx.space.bulk.n_dofs].nnz == 0


def test_henry_coupling(make_problem):
    problem = make_problem()
    ctx = _context(problem)
    matrix, residual = assemble_coupling(ctx, problem.params)
    _assert_psd(matrix)
    assert not residual.any()
    pair = np.concatenate([np.full(ctx.space.bulk.n_dofs, 0.7), np.full(ctx.space.surf.n_dofs, 0.7)])
    assert np.abs(matrix @ pair).max() < 1e-12


def test_upwind_reproduces_incoming(make_problem, constant):
    problem = make_problem(h=0.05)
    ctx = _context(problem)
    matrix, vector = assemble_upwind(ctx, problem.params, InitialTrace(constant(1.0), constant(1.0)))
    _assert_psd(matrix)
    ones = np.ones(ctx.n_dofs)
    assert matrix @ ones == pytest.approx(vector, abs=1e-13)
    # mass of the bulk domain at t = 0 (area 1 - pi R^2) and of the circle (2 pi R), up to the P1 geometry
    assert vector[: ctx.space.bulk.n_dofs].sum() == pytest.approx(1.0 - np.pi * 0.18**2, rel=1e-2)
    assert vector[ctx.space.bulk.n_dofs :].sum() == pytest.approx(2.0 * np.pi * 0.18, rel=1e-2)


def test_sources_are_linear(make_problem, constant):
    base = make_problem(h=0.05, f_B=constant(1.0), f_S=constant(-0.5))
    doubled = make_problem(h=0.05, f_B=constant(2.0), f_S=constant(-1.0))
    ctx = _context(base)
    once = assemble_sources(ctx, base.params)
    twice = assemble_sources(ctx, doubled.params)
    assert twice == pytest.approx(2.0 * once)
    assert not assemble_sources(ctx, make_problem(h=0.05).params).any()
    # space-time volume of the slab [0, 0.25]
    assert once[: ctx.space.bulk.n_dofs].sum() == pytest.approx(0.25 * (1.0 - np.pi * 0.18**2), rel=1e-2)


def test_outer_boundary_flux(make_problem):
    flux = make_problem(boundary_flux=lambda x, t: np.tile([1.0, 0.0], (len(x), 1)))
    ctx = _context(flux)
    vector = assemble_sources(ctx, flux.params)
    # (1, 0) . nu is +1 on the right edge, -1 on the left edge
    assert vector.sum() == pytest.approx(0.0, abs=1e-12)
    right = ctx.space.bulk.node_coords[:, 0] == 1.0
    nt = ctx.space.bulk.n_time
    assert vector[: ctx.space.bulk.n_dofs].reshape(-1, nt)[right].sum() == pytest.approx(0.25)


@pytest.mark.parametrize("k", [1, 2])
def test_langmuir_jacobian(make_problem, k: int):
    problem = make_problem(Model.LANGMUIR)
    ctx = _context(problem, k)
    system = SlabSystem(ctx, problem.params, Model.LANGMUIR, InitialTrace(problem.params.u_B0, problem.params.u_S0))
    assert not system.is_linear
    rng = np.random.default_rng(0)
    state = initial_guess(ctx, problem.params) + 0.1 * rng.standard_normal(system.n_dofs)
    eps = 1e-4
    for _ in range(3):
        direction = rng.standard_normal(system.n_dofs)
        applied = system.jacobian(state) @ direction
        central = (system.residual(state + eps * direction) - system.residual(state - eps * direction)) / (2 * eps)
        assert np.linalg.norm(central - applied) <= 1e-8 * np.linalg.norm(applied)


def test_langmuir_constant_pair_is_a_root(make_problem):
    problem = make_problem(Model.LANGMUIR)
    ctx = _context(problem)
    system = SlabSystem(ctx, problem.params, Model.LANGMUIR, InitialTrace(problem.params.u_B0, problem.params.u_S0))
    state = initial_guess(ctx, problem.params)
    assert np.abs(system.residual(state)).max() < 1e-12


def test_assemble_slab_system(make_problem):
    henry = make_problem()
    ctx = _context(henry)
    incoming = InitialTrace(henry.params.u_B0, henry.params.u_S0)
    matrix, rhs = assemble_slab_system(ctx, henry.params, Model.HENRY, incoming)
    system = SlabSystem(ctx, henry.params, Model.HENRY, incoming)
    assert (matrix != system.matrix).nnz == 0
    assert rhs == pytest.approx(system.rhs)

    langmuir = make_problem(Model.LANGMUIR)
    ctx = _context(langmuir)
    incoming = InitialTrace(langmuir.params.u_B0, langmuir.params.u_S0)
    jacobian, residual = assemble_slab_system(ctx, langmuir.params, Model.LANGMUIR, incoming)
    system = SlabSystem(ctx, langmuir.params, Model.LANGMUIR, incoming)
    assert residual == pytest.approx(-system.rhs)
    assert (jacobian != system.matrix).nnz == 0


def test_slab_trace_outside_previous_domain(make_problem):
    problem = make_problem()
    first = _context(problem, n=1)
    second = _context(problem, n=2)
    trace = SlabTrace(DiscreteFunction.coupled(np.zeros(first.n_dofs), first.space))
    outside = np.setdiff1d(second.active.surface, first.active.surface)
    assert len(outside)
    with pytest.raises(TransferOutOfDomain):
        trace.surface(outside[:1], np.array([[0.2, 0.2]]), None, None)
