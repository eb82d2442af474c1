import dataclasses

import numpy as np
import pytest

from stfem.assembly import Model, ModelParams
from stfem.levelset import LevelsetField
from stfem.mesh import TimePartition, build_structured_mesh
from stfem.solver import MarchProblem

CIRCLE_RADIUS = 0.18
CIRCLE_ORBIT = 0.28


def _centre(t):
    return np.array([0.5 + CIRCLE_ORBIT * np.sin(np.pi * t), 0.5 + CIRCLE_ORBIT * np.cos(np.pi * t)])


def _offset(x, t):
    d = np.asarray(x, dtype=float) - _centre(t)
    return d, np.linalg.norm(d, axis=1)


def _circle_dt(x, t):
    d, r = _offset(x, t)
    velocity = CIRCLE_ORBIT * np.pi * np.array([np.cos(np.pi * t), -np.sin(np.pi * t)])
    return d @ velocity / r


def _constant(value):
    return lambda x, t: np.full(len(np.atleast_2d(x)), float(value))


@pytest.fixture
def moving_circle() -> LevelsetField:
    """Circle of radius 0.18 on an orbit of radius 0.28 around the square's centre; the bulk is outside"""
    return LevelsetField(
        phi=lambda x, t: CIRCLE_RADIUS - _offset(x, t)[1],
        grad=lambda x, t: -_offset(x, t)[0] / _offset(x, t)[1][:, None],
        dt=_circle_dt,
    )


@pytest.fixture
def rigid_rotation():
    """w = pi (0.5 - y, x - 0.5) and its Jacobian"""

    def velocity(x, t):
        x = np.atleast_2d(x)
        return np.pi * np.column_stack([0.5 - x[:, 1], x[:, 0] - 0.5])

    def velocity_grad(x, t):
        return np.tile(np.array([[0.0, -np.pi], [np.pi, 0.0]]), (len(np.atleast_2d(x)), 1, 1))

    return velocity, velocity_grad


@pytest.fixture
def make_problem(moving_circle, rigid_rotation):
    """
    Factory of marching problems on the moving circle. Initial data default to the constant pair
    u_B = 0.7 and the matching surface value of the chosen model; other keywords replace
    ModelParams fields.
    """
    velocity, velocity_grad = rigid_rotation

    def factory(model: Model = Model.HENRY, h: float = 0.2, dt: float = 0.25, t_final: float = 0.5, **changes):
        b_BS = 1.0 if model is Model.LANGMUIR else 0.0
        params = ModelParams(
            k_B=0.01,
            k_S=1.0,
            b_B=1.0,
            b_S=1.0,
            b_BS=b_BS,
            gamma_B=0.05,
            gamma_S=0.05,
            velocity=velocity,
            velocity_grad=velocity_grad,
            u_B0=_constant(0.7),
            u_S0=_constant(0.7 / (1.0 + b_BS * 0.7)),
        )
        params = dataclasses.replace(params, **changes)
        return MarchProblem(moving_circle, params, model, build_structured_mesh(h), TimePartition.from_step(t_final, dt))

    return factory


@pytest.fixture
def constant():
    return _constant
