# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.
"""
Manufactured test problems on the unit square: a circle of radius 0.18 travelling on a circular
orbit, with the bulk domain outside of it and a rotating divergence-free velocity.

Sources are derived symbolically with sympy and turned into numpy closures with lambdify.
Surface quantities are extended off the circle constantly along the normal, i.e. they are
composed with the closest-point projection onto the exact circle.
"""
from __future__ import annotations

import dataclasses
import functools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import sympy as sym

from convstudy.config import T_FINAL
from stfem.assembly import Model, ModelParams, PointField
from stfem.levelset import LevelsetField
from stfem.mesh import BackgroundMesh, TimePartition
from stfem.solver import MarchProblem

__all__ = [
    "RADIUS",
    "ORBIT",
    "EXACT_AREA",
    "EXACT_LENGTH",
    "Constants",
    "ManufacturedProblem",
    "circle_centre",
    "project_to_circle",
    "build_manufactured_case",
    "build_constant_case",
    "angular_laplacian",
]

RADIUS = 0.18
ORBIT = 0.28

EXACT_AREA = 1.0 - math.pi * RADIUS**2
EXACT_LENGTH = 2.0 * math.pi * RADIUS

X, Y, T = sym.symbols("x y t", real=True)
_HALF = sym.Rational(1, 2)
_RADIUS = sym.Rational(9, 50)
_ORBIT = sym.Rational(7, 25)


@dataclass(frozen=True)
class Constants:
    k_B: float = 0.01
    k_S: float = 1.0
    b_B: float = 1.0
    b_S: float = 1.0
    b_BS: float = 1.0
    gamma_B: float = 0.05
    gamma_S: float = 0.05

    def replace(self, **changes) -> Constants:
        return dataclasses.replace(self, **{k: float(v) for k, v in changes.items()})


@dataclass(frozen=True, eq=False)
class ManufacturedProblem:
    """
    :ivar exact_bulk: u_B
    :ivar exact_surface: u_S, normal-constant off the circle
    :ivar coupling_flux: f_coupl = -k_B grad u_B . n, normal-constant off the circle
    :ivar surface_laplacian: Cartesian Laplacian of the extended u_S; equals the Laplace-Beltrami
        operator on the circle
    """

    model: Model
    levelset: LevelsetField
    params: ModelParams
    exact_bulk: PointField
    exact_surface: PointField
    coupling_flux: PointField
    t_final: float = T_FINAL
    surface_laplacian: Optional[PointField] = None
    expressions: dict[str, sym.Expr] = field(default_factory=dict)

    def march_problem(self, mesh: BackgroundMesh, partition: TimePartition) -> MarchProblem:
        return MarchProblem(self.levelset, self.params, self.model, mesh, partition)


def circle_centre(t) -> np.ndarray:
    """:return: centres at the given times, shape (m, 2)"""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    return np.column_stack([0.5 + ORBIT * np.sin(np.pi * t), 0.5 + ORBIT * np.cos(np.pi * t)])


def project_to_circle(points: np.ndarray, times) -> tuple[np.ndarray, np.ndarray]:
    """
    :return: (closest points on the circle, outward unit normals n = (x - c) / |x - c|)
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    times = np.broadcast_to(np.asarray(times, dtype=float), (len(points),))
    centre = circle_centre(times)
    offset = points - centre
    dist = np.linalg.norm(offset, axis=1)
    normals = offset / np.where(dist > 0.0, dist, 1.0)[:, None]
    return centre + RADIUS * normals, normals


def _scalar(expr: sym.Expr) -> PointField:
    fn = sym.lambdify((X, Y, T), expr, modules="numpy", cse=True)

    def closure(points, times):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        times = np.broadcast_to(np.asarray(times, dtype=float), (len(points),))
        value = fn(points[:, 0], points[:, 1], times)
        return np.broadcast_to(np.asarray(value, dtype=float), (len(points),)).copy()

    return closure


def _vector(exprs) -> PointField:
    parts = [_scalar(e) for e in exprs]
    return lambda points, times: np.stack([p(points, times) for p in parts], axis=-1)


def _matrix(rows) -> PointField:
    parts = [_vector(row) for row in rows]
    return lambda points, times: np.stack([p(points, times) for p in parts], axis=-2)


def _on_circle(raw: PointField) -> PointField:
    def closure(points, times):
        projected, _ = project_to_circle(points, times)
        return raw(projected, times)

    return closure


def _constant(value: float) -> PointField:
    return lambda points, times: np.full(len(np.atleast_2d(points)), float(value))


def _geometry() -> tuple[LevelsetField, sym.Matrix, sym.Expr, tuple[sym.Expr, sym.Expr], sym.Matrix, dict]:
    xc = _HALF + _ORBIT * sym.sin(sym.pi * T)
    yc = _HALF + _ORBIT * sym.cos(sym.pi * T)
    rho = sym.sqrt((X - xc) ** 2 + (Y - yc) ** 2)
    phi = _RADIUS - rho
    normal = ((X - xc) / rho, (Y - yc) / rho)
    velocity = sym.Matrix([sym.pi * (_HALF - Y), sym.pi * (X - _HALF)])
    velocity_grad = velocity.jacobian([X, Y])
    levelset = LevelsetField(
        phi=_scalar(phi),
        grad=_vector([sym.diff(phi, X), sym.diff(phi, Y)]),
        dt=_scalar(sym.diff(phi, T)),
    )
    projection = {X: xc + _RADIUS * normal[0], Y: yc + _RADIUS * normal[1]}
    return levelset, velocity, phi, normal, velocity_grad, projection


@functools.lru_cache(maxsize=8)
def build_manufactured_case(model: Model, constants: Optional[Constants] = None) -> ManufacturedProblem:
    """
    u_B = 0.5 + 0.4 cos(pi x) sin(pi y) cos(2 pi t), u_S from the coupling law, and the sources
    making both the solution of the coupled problem. b_BS is forced to 0 for the Henry model.
    """
    if constants is None:
        constants = Constants()
    b_BS = constants.b_BS if model is Model.LANGMUIR else 0.0
    k_B, k_S, b_B, b_S = (sym.nsimplify(v) for v in (constants.k_B, constants.k_S, constants.b_B, constants.b_S))
    b_BS_sym = sym.nsimplify(b_BS)

    levelset, velocity, phi, normal, velocity_grad, projection = _geometry()

    u_B = _HALF + sym.Rational(2, 5) * sym.cos(sym.pi * X) * sym.sin(sym.pi * Y) * sym.cos(2 * sym.pi * T)
    grad_u_B = [sym.diff(u_B, X), sym.diff(u_B, Y)]
    flux_normal = grad_u_B[0] * normal[0] + grad_u_B[1] * normal[1]

    u_B_on = u_B.subs(projection, simultaneous=True)
    f_coupl = -k_B * flux_normal.subs(projection, simultaneous=True)
    u_S = (b_B * u_B_on - f_coupl) / (b_S + b_BS_sym * u_B_on)

    f_B = (
        sym.diff(u_B, T)
        + velocity[0] * grad_u_B[0]
        + velocity[1] * grad_u_B[1]
        - k_B * (sym.diff(u_B, X, 2) + sym.diff(u_B, Y, 2))
    )

    grad_u_S = [sym.diff(u_S, X), sym.diff(u_S, Y)]
    n_vec = sym.Matrix(normal)
    div_gamma_w = velocity_grad.trace() - (n_vec.T * velocity_grad * n_vec)[0, 0]
    lap_u_S = sym.diff(u_S, X, 2) + sym.diff(u_S, Y, 2)
    f_S = (
        sym.diff(u_S, T)
        + velocity[0] * grad_u_S[0]
        + velocity[1] * grad_u_S[1]
        + div_gamma_w * u_S
        - k_S * lap_u_S
        - f_coupl
    )
    # nu of the bulk domain is -n
    mismatch = -k_B * flux_normal + f_coupl

    exact_bulk = _scalar(u_B)
    exact_surface = _scalar(u_S)
    params = ModelParams(
        k_B=constants.k_B,
        k_S=constants.k_S,
        b_B=constants.b_B,
        b_S=constants.b_S,
        b_BS=b_BS,
        gamma_B=constants.gamma_B,
        gamma_S=constants.gamma_S,
        velocity=_vector(velocity),
        velocity_grad=_matrix(velocity_grad.tolist()),
        u_B0=exact_bulk,
        u_S0=exact_surface,
        f_B=_scalar(f_B),
        f_S=_on_circle(_scalar(f_S)),
        interface_source=_scalar(mismatch),
        boundary_flux=_vector([k_B * g for g in grad_u_B]),
    )
    return ManufacturedProblem(
        model=model,
        levelset=levelset,
        params=params,
        exact_bulk=exact_bulk,
        exact_surface=exact_surface,
        coupling_flux=_scalar(f_coupl),
        surface_laplacian=_on_circle(_scalar(lap_u_S)),
        expressions={"phi": phi, "u_B": u_B, "u_S": u_S, "f_coupl": f_coupl, "f_B": f_B, "f_S": f_S},
    )


def build_constant_case(value: float = 0.7, constants: Optional[Constants] = None) -> ManufacturedProblem:
    """
    Same geometry and velocity, Henry coupling, no sources: u_B = value and u_S = b_B value / b_S
    solve the problem exactly.
    """
    if constants is None:
        constants = Constants()
    levelset, velocity, _, _, velocity_grad, _ = _geometry()
    surface_value = constants.b_B * value / constants.b_S
    params = ModelParams(
        k_B=constants.k_B,
        k_S=constants.k_S,
        b_B=constants.b_B,
        b_S=constants.b_S,
        b_BS=0.0,
        gamma_B=constants.gamma_B,
        gamma_S=constants.gamma_S,
        velocity=_vector(velocity),
        velocity_grad=_matrix(velocity_grad.tolist()),
        u_B0=_constant(value),
        u_S0=_constant(surface_value),
    )
    return ManufacturedProblem(
        model=Model.HENRY,
        levelset=levelset,
        params=params,
        exact_bulk=_constant(value),
        exact_surface=_constant(surface_value),
        coupling_flux=_constant(0.0),
        surface_laplacian=_constant(0.0),
    )


def angular_laplacian(surface_field: PointField, t: float, angles: np.ndarray, step: float = 2e-3) -> np.ndarray:
    """
    Laplace-Beltrami operator on the circle at time t by a fourth-order central difference in the
    angle: g''(theta) / R^2 with g(theta) = u(c(t) + R (cos theta, sin theta)).
    """
    angles = np.asarray(angles, dtype=float)
    centre = circle_centre(t)[0]

    def g(theta: np.ndarray) -> np.ndarray:
        points = centre + RADIUS * np.column_stack([np.cos(theta), np.sin(theta)])
        return surface_field(points, np.full(len(theta), float(t)))

    second = (
        -g(angles + 2 * step) + 16 * g(angles + step) - 30 * g(angles) + 16 * g(angles - step) - g(angles - 2 * step)
    ) / (12 * step**2)
    return second / RADIUS**2
