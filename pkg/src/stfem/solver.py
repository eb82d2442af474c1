# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.
"""
Slab-by-slab time marching: geometry, spaces and system per slab, a direct solve (Henry) or
Newton's method (Langmuir), and the hand-over of the t_n trace to the next slab.
"""
from __future__ import annotations

import dataclasses
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree

from stfem.assembly import (
    IncomingTrace,
    InitialTrace,
    Model,
    ModelParams,
    SlabContext,
    SlabSystem,
    SlabTrace,
)
from stfem.basis import gauss_legendre
from stfem.isoparam import (
    SlabDeformation,
    build_slab_deformation,
    deformation_times,
    interpolate_ho_levelset,
)
from stfem.levelset import LevelsetField, classify_slab, interpolate_slab_levelset
from stfem.mesh import BackgroundMesh, LagrangeNodes, TimePartition, build_lagrange_nodes
from stfem.spaces import DiscreteFunction, SpaceTimeSpace, build_coupled_space
from stfem.utils import QuietablePrint

__all__ = [
    "SingularSystem",
    "NewtonDiverged",
    "MarchConfig",
    "MarchProblem",
    "SlabSolution",
    "SlabStats",
    "MarchStats",
    "NewtonResult",
    "solve_linear_system",
    "newton_solve",
    "build_slab_context",
    "initial_guess",
    "march",
]

RELATIVE_RESIDUAL = 1e-10
ABSOLUTE_RESIDUAL = 1e-12
DIVERGENCE_GROWTH = 1e6
MIN_DAMPING = 1.0 / 64


class SingularSystem(ArithmeticError):
    """Raised if the factorisation breaks down or the solve misses the residual check"""

    pass


class NewtonDiverged(ArithmeticError):
    def __init__(self, message: str, slab: Optional[int] = None, iterations: int = 0, increment: float = math.nan):
        super().__init__(message)
        self.slab = slab
        self.iterations = iterations
        self.increment = increment

    def __str__(self):
        where = f"slab {self.slab}: " if self.slab is not None else ""
        return f"{where}{self.args[0]} (iterations={self.iterations}, |w|={self.increment:.3e})"


@dataclass(frozen=True)
class MarchConfig:
    """
    Discretisation and solver settings. Unset quadrature and sampling fields derive from the
    orders: spatial degree 2 k_s + 2, k_t + q_t + 2 time points, 2 ktls + 5 samples.
    """

    k_s: int
    k_t: int
    q_s: int
    q_t: int
    levelset_order: Optional[int] = None
    order_s: Optional[int] = None
    order_t: Optional[int] = None
    n_samples: Optional[int] = None
    strip_factor: float = 1.0
    newton_tol: float = 1e-9
    newton_maxiter: int = 25
    damped: bool = False
    deterministic: bool = True
    threads: int = 1

    def __post_init__(self):
        if self.k_s < 1 or self.k_t < 0:
            raise ValueError(f"Invalid FE orders k_s={self.k_s}, k_t={self.k_t}")
        if self.q_s < 1 or self.q_t < 1:
            raise ValueError(f"Invalid geometry orders q_s={self.q_s}, q_t={self.q_t}")
        if self.ktls < 1:
            raise ValueError(f"Level set order must be >= 1, got {self.ktls}")
        if self.newton_maxiter < 1 or not self.newton_tol > 0.0:
            raise ValueError("Newton needs maxiter >= 1 and a positive tolerance")
        if self.strip_factor < 0.0:
            raise ValueError(f"strip_factor must be >= 0, got {self.strip_factor}")

    @classmethod
    def for_order(cls, k: int, **overrides) -> MarchConfig:
        """k = k_s = k_t = q_s = q_t"""
        return cls(**{"k_s": k, "k_t": k, "q_s": k, "q_t": k, **overrides})

    @property
    def ktls(self) -> int:
        return self.q_t if self.levelset_order is None else self.levelset_order

    @property
    def spatial_degree(self) -> int:
        return 2 * self.k_s + 2 if self.order_s is None else self.order_s

    @property
    def time_points(self) -> int:
        return self.k_t + self.q_t + 2 if self.order_t is None else self.order_t

    @property
    def samples(self) -> int:
        return 2 * self.ktls + 5 if self.n_samples is None else self.n_samples

    def replace(self, **changes) -> MarchConfig:
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True, eq=False)
class MarchProblem:
    levelset: LevelsetField
    params: ModelParams
    model: Model
    mesh: BackgroundMesh
    partition: TimePartition


@dataclass(frozen=True, eq=False)
class SlabSolution:
    """Solution of slab n on its coupled space"""

    n: int
    context: SlabContext
    function: DiscreteFunction

    @property
    def coefficients(self) -> np.ndarray:
        return self.function.coefficients

    def trace(self) -> SlabTrace:
        return SlabTrace(self.function)

    def end_values(self) -> tuple[np.ndarray, np.ndarray]:
        """:return: spatial nodal values at t_n of the bulk and the surface part"""
        return self.function.bulk.nodal_trace(1.0), self.function.surface.nodal_trace(1.0)


@dataclass(frozen=True)
class SlabStats:
    n: int
    newton_iterations: int
    increment: float
    linear_residual: float
    seconds: float
    n_dofs: int
    failed_roots: int = 0


@dataclass
class MarchStats:
    slabs: list[SlabStats] = field(default_factory=list)

    @property
    def max_newton(self) -> int:
        return max((s.newton_iterations for s in self.slabs), default=0)

    @property
    def max_dofs(self) -> int:
        return max((s.n_dofs for s in self.slabs), default=0)

    @property
    def seconds(self) -> float:
        return sum(s.seconds for s in self.slabs)


@dataclass(frozen=True)
class NewtonResult:
    solution: np.ndarray
    iterations: int
    increment: float
    linear_residual: float


class NonlinearSystem(Protocol):
    def residual(self, state: np.ndarray) -> np.ndarray:
        ...

    def jacobian(self, state: np.ndarray) -> sp.spmatrix:
        ...


def _checked_solve(matrix: sp.spmatrix, rhs: np.ndarray) -> tuple[np.ndarray, float]:
    matrix = sp.csc_matrix(matrix)
    rhs = np.asarray(rhs, dtype=float)
    if matrix.shape[0] != matrix.shape[1] or matrix.shape[0] != len(rhs):
        raise ValueError(f"Shape mismatch: matrix {matrix.shape}, rhs {rhs.shape}")
    try:
        lu = splu(matrix)
    except RuntimeError as e:
        raise SingularSystem(f"Factorisation failed: {e}") from e
    x = lu.solve(rhs)
    if not np.all(np.isfinite(x)):
        raise SingularSystem("Solution is not finite")
    scale = float(np.linalg.norm(rhs))
    limit = RELATIVE_RESIDUAL * scale if scale > 0.0 else ABSOLUTE_RESIDUAL
    residual = float(np.linalg.norm(matrix @ x - rhs))
    if residual > limit:
        # one step of iterative refinement
        x = x + lu.solve(rhs - matrix @ x)
        residual = float(np.linalg.norm(matrix @ x - rhs))
    if residual > limit:
        raise SingularSystem(f"Residual {residual:.3e} exceeds {limit:.3e}")
    return x, residual


def solve_linear_system(matrix: sp.spmatrix, rhs: np.ndarray) -> np.ndarray:
    """Sparse LU solve with a residual check; raises SingularSystem."""
    x, _ = _checked_solve(matrix, rhs)
    return x


def newton_solve(
    system: NonlinearSystem,
    initial: np.ndarray,
    tol: float = 1e-9,
    maxiter: int = 25,
    damped: bool = False,
) -> NewtonResult:
    """
    u <- u - DF(u)^-1 F(u) until the Euclidean norm of the increment drops below tol.

    The reported iteration count is the number of increments with norm >= tol, so a linear
    residual converges in 1. Raises NewtonDiverged after maxiter solves, on non-finite values,
    or if an increment grows past 1e6 times the first.
    """
    u = np.array(initial, dtype=float, copy=True)
    first = None
    iterations = 0
    linear_residual = 0.0
    for _ in range(maxiter):
        residual = system.residual(u)
        if not np.all(np.isfinite(residual)):
            raise NewtonDiverged("Residual is not finite", iterations=iterations)
        try:
            increment, linear_residual = _checked_solve(system.jacobian(u), residual)
        except SingularSystem as e:
            raise NewtonDiverged(f"Linearisation is singular: {e}", iterations=iterations) from e
        size = float(np.linalg.norm(increment))
        if first is None:
            first = max(size, np.finfo(float).tiny)
        elif size > DIVERGENCE_GROWTH * first:
            raise NewtonDiverged("Increment blew up", iterations=iterations, increment=size)

        if damped and size >= tol:
            u = _damped_step(system, u, increment, float(np.linalg.norm(residual)))
        else:
            u = u - increment
        if size < tol:
            return NewtonResult(u, max(iterations, 1), size, linear_residual)
        iterations += 1
    raise NewtonDiverged(f"No convergence in {maxiter} steps", iterations=iterations, increment=size)


def _damped_step(system: NonlinearSystem, u: np.ndarray, increment: np.ndarray, norm0: float) -> np.ndarray:
    """Step halving until the residual norm decreases"""
    damping = 1.0
    while damping >= MIN_DAMPING:
        candidate = u - damping * increment
        if np.linalg.norm(system.residual(candidate)) < norm0:
            return candidate
        damping *= 0.5
    warnings.warn("Damped Newton stagnated; taking the smallest step", RuntimeWarning)
    return u - 2.0 * damping * increment


def _max_speed(problem: MarchProblem, times: np.ndarray) -> float:
    vertices = problem.mesh.vertices
    speed = 0.0
    for t in times:
        w = problem.params.velocity(vertices, np.full(len(vertices), t))
        speed = max(speed, float(np.max(np.linalg.norm(w, axis=1))))
    return speed


def build_slab_context(
    problem: MarchProblem,
    config: MarchConfig,
    n: int,
    fe_nodes: Optional[LagrangeNodes] = None,
    geo_nodes: Optional[LagrangeNodes] = None,
) -> SlabContext:
    """Level set, active sets, deformation and spaces of slab n (1-based)"""
    mesh = problem.mesh
    interval = problem.partition.interval(n)
    dt = interval[1] - interval[0]
    slab_phi = interpolate_slab_levelset(problem.levelset, mesh, interval, config.ktls)

    quad_times = interval[0] + dt * gauss_legendre(config.time_points)[0]
    sample_times = np.linspace(interval[0], interval[1], config.samples)
    strip = config.strip_factor * _max_speed(problem, sample_times) * dt
    active = classify_slab(slab_phi, config.samples, strip_width=strip, extra_times=quad_times)

    if config.q_s > 1:
        if geo_nodes is None:
            geo_nodes = build_lagrange_nodes(mesh, config.q_s)
        phi_h = interpolate_ho_levelset(problem.levelset, geo_nodes, deformation_times(interval, config.q_t))
        deformation = build_slab_deformation(phi_h, slab_phi, active, geo_nodes)
    else:
        deformation = SlabDeformation.identity(mesh, interval, config.q_t)

    space = build_coupled_space(active, mesh, config.k_s, config.k_t, interval, nodes=fe_nodes)
    return SlabContext(
        n=n,
        slab_phi=slab_phi,
        active=active,
        deformation=deformation,
        space=space,
        order_s=config.spatial_degree,
        order_t=config.time_points,
        threads=config.threads,
        deterministic=config.deterministic,
    )


def _transfer_nodal(
    new: SpaceTimeSpace, old: Optional[SpaceTimeSpace], values: np.ndarray, fallback: Callable[[np.ndarray], np.ndarray]
) -> np.ndarray:
    """Old nodal values at the new nodes; unknown nodes take the nearest old node (or the fallback)."""
    if not new.n_nodes:
        return np.empty(0)
    if old is None or not old.n_nodes:
        return fallback(new.node_coords)
    position = old.compact_nodes(new.node_ids)
    out = np.empty(new.n_nodes)
    known = position >= 0
    out[known] = values[position[known]]
    if not known.all():
        _, nearest = cKDTree(old.node_coords).query(new.node_coords[~known])
        out[~known] = values[nearest]
    return out


def initial_guess(
    ctx: SlabContext, params: ModelParams, previous: Optional[SlabSolution] = None
) -> np.ndarray:
    """
    Constant-in-time extension of the incoming trace at the nodes of the new slab: the previous
    t_n trace, or the initial data on the first slab.
    """
    bulk, surf = ctx.space.bulk, ctx.space.surf
    t0 = ctx.interval[0]

    def sample(closure):
        return lambda coords: np.asarray(closure(coords, np.full(len(coords), t0)), dtype=float)

    if previous is None:
        bulk_nodes = sample(params.u_B0)(bulk.node_coords) if bulk.n_nodes else np.empty(0)
        surf_nodes = sample(params.u_S0)(surf.node_coords) if surf.n_nodes else np.empty(0)
    else:
        old_bulk, old_surf = previous.end_values()
        old_space = previous.context.space
        bulk_nodes = _transfer_nodal(bulk, old_space.bulk, old_bulk, sample(params.u_B0))
        surf_nodes = _transfer_nodal(surf, old_space.surf, old_surf, sample(params.u_S0))
    return np.concatenate([np.repeat(bulk_nodes, bulk.n_time), np.repeat(surf_nodes, surf.n_time)])


def march(
    problem: MarchProblem,
    config: MarchConfig,
    echo: Optional[QuietablePrint] = None,
    on_slab: Optional[Callable[[SlabSolution, SlabStats], None]] = None,
) -> tuple[SlabSolution, MarchStats]:
    """
    Solves all slabs of the partition in order

    :param problem: Geometry, data, model, mesh and time partition
    :param config: Discretisation settings
    :param echo: Progress printer; one marker per slab
    :param on_slab: Called after every slab
    :return: (last slab solution, statistics)
    """
    if echo is None:
        echo = QuietablePrint(quiet=True)
    fe_nodes = build_lagrange_nodes(problem.mesh, config.k_s)
    geo_nodes = build_lagrange_nodes(problem.mesh, config.q_s) if config.q_s > 1 else None
    params = problem.params

    incoming: IncomingTrace = InitialTrace(params.u_B0, params.u_S0)
    previous: Optional[SlabSolution] = None
    stats = MarchStats()
    for n in range(1, problem.partition.n_slabs + 1):
        started = time.monotonic()
        ctx = build_slab_context(problem, config, n, fe_nodes, geo_nodes)
        system = SlabSystem(ctx, params, problem.model, incoming)
        if problem.model is Model.HENRY:
            coefficients, linear_residual = _checked_solve(system.matrix, system.rhs)
            iterations, increment = 1, 0.0
        else:
            try:
                result = newton_solve(
                    system,
                    initial_guess(ctx, params, previous),
                    tol=config.newton_tol,
                    maxiter=config.newton_maxiter,
                    damped=config.damped,
                )
            except NewtonDiverged as e:
                e.slab = n
                raise
            coefficients, linear_residual = result.solution, result.linear_residual
            iterations, increment = result.iterations, result.increment

        solution = SlabSolution(n, ctx, DiscreteFunction.coupled(coefficients, ctx.space))
        failed = ctx.deformation.failed_roots
        slab_stats = SlabStats(
            n=n,
            newton_iterations=iterations,
            increment=increment,
            linear_residual=linear_residual,
            seconds=time.monotonic() - started,
            n_dofs=ctx.n_dofs,
            failed_roots=failed,
        )
        stats.slabs.append(slab_stats)
        echo.marker("!" if failed else ("N" if problem.model is Model.LANGMUIR else "."))
        if on_slab is not None:
            on_slab(solution, slab_stats)
        incoming = SlabTrace(solution.function)
        previous = solution
    return previous, stats
