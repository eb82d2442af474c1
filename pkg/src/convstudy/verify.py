# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.
"""
Self-checks behind `convstudy verify`: every suite returns a SuiteResult and prints one
PASS/FAIL line.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from numpy.polynomial import Polynomial

from convstudy.manufactured import (
    EXACT_AREA,
    EXACT_LENGTH,
    RADIUS,
    ManufacturedProblem,
    angular_laplacian,
    build_constant_case,
    build_manufactured_case,
    circle_centre,
)
from convstudy.measure import mapped_measures
from convstudy.study import format_optional, least_squares_eoc, schedule
from stfem.assembly import InitialTrace, Model, SlabSystem
from stfem.basis import REF_VERTICES
from stfem.mesh import TimePartition, build_structured_mesh
from stfem.quadrature import QuadTag, cut_triangle_rule
from stfem.solver import MarchConfig, build_slab_context, initial_guess, march
from stfem.utils import QuietablePrint

__all__ = [
    "SuiteResult",
    "clip_negative",
    "polygon_moment",
    "segment_moment",
    "check_cut_rules",
    "check_geometry",
    "check_jacobian",
    "check_constant_pair",
    "check_surface_laplacian",
    "run_all",
]


@dataclass(frozen=True)
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def __str__(self):
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail} ({self.seconds:,.2f} s)"


def clip_negative(phis: np.ndarray) -> tuple[np.ndarray, Optional[tuple[np.ndarray, np.ndarray]]]:
    """
    Clips the reference triangle to {phi_lin < 0}

    :return: (polygon vertices in order, zero segment or None)
    """
    polygon = []
    zero = []
    for i in range(3):
        a, b = REF_VERTICES[i], REF_VERTICES[(i + 1) % 3]
        fa, fb = phis[i], phis[(i + 1) % 3]
        if fa < 0.0:
            polygon.append(a)
        if fa * fb < 0.0:
            p = a + (fa / (fa - fb)) * (b - a)
            polygon.append(p)
            zero.append(p)
    segment = (zero[0], zero[1]) if len(zero) == 2 else None
    return np.array(polygon).reshape(-1, 2), segment


def _edge_polys(a: np.ndarray, b: np.ndarray) -> tuple[Polynomial, Polynomial]:
    return Polynomial([a[0], b[0] - a[0]]), Polynomial([a[1], b[1] - a[1]])


def polygon_moment(polygon: np.ndarray, px: int, py: int) -> float:
    """Integral of x^px y^py over a counter-clockwise polygon, exact (divergence theorem)"""
    total = 0.0
    for k in range(len(polygon)):
        a, b = polygon[k], polygon[(k + 1) % len(polygon)]
        x, y = _edge_polys(a, b)
        integrand = x ** (px + 1) * y**py * (b[1] - a[1]) / (px + 1)
        antideriv = integrand.integ()
        total += antideriv(1.0) - antideriv(0.0)
    return float(total)


def segment_moment(a: np.ndarray, b: np.ndarray, px: int, py: int) -> float:
    """Integral of x^px y^py along the segment a-b, exact"""
    x, y = _edge_polys(a, b)
    antideriv = (x**px * y**py).integ()
    return float((antideriv(1.0) - antideriv(0.0)) * np.linalg.norm(b - a))


def _timed(name: str, check: Callable[[], tuple[bool, str]]) -> SuiteResult:
    started = time.monotonic()
    try:
        passed, detail = check()
    except Exception as e:
        passed, detail = False, f"{type(e).__name__}: {e}"
    return SuiteResult(name, passed, detail, time.monotonic() - started)


def check_cut_rules(n_cases: int = 200, k_s: int = 2, seed: int = 0, tol: float = 1e-12) -> SuiteResult:
    """Cut volume and interface rules against the clipped-polygon oracle for all monomials up to 2 k_s + 2"""
    degree = 2 * k_s + 2
    exponents = [(a, d - a) for d in range(degree + 1) for a in range(d + 1)]

    def check() -> tuple[bool, str]:
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(n_cases):
            phis = rng.uniform(-1.0, 1.0, 3)
            polygon, segment = clip_negative(phis)
            volume = cut_triangle_rule(phis, QuadTag.VOL_NEG, degree)
            interface = cut_triangle_rule(phis, QuadTag.INTERFACE, degree)
            for px, py in exponents:
                if len(polygon) >= 3:
                    exact = polygon_moment(polygon, px, py)
                else:
                    exact = 0.0
                got = float(np.sum(volume.weights * volume.points[:, 0] ** px * volume.points[:, 1] ** py))
                worst = max(worst, abs(got - exact))
                exact = 0.0 if segment is None else segment_moment(*segment, px, py)
                pts = interface.points
                got = float(np.sum(interface.weights * pts[:, 0] ** px * pts[:, 1] ** py))
                worst = max(worst, abs(got - exact))
        return worst <= tol, f"{n_cases} level sets, degree {degree}, max deviation {worst:.2e}"

    return _timed("cut rules", check)


def _geometry_errors(case: ManufacturedProblem, q: int, levels: range) -> tuple[list[float], list[float], list[float]]:
    hs, area_errors, length_errors = [], [], []
    config = MarchConfig.for_order(q, k_s=1, k_t=0)
    for i in levels:
        h, dt = schedule(i)
        problem = case.march_problem(build_structured_mesh(h), TimePartition.from_step(case.t_final, dt))
        ctx = build_slab_context(problem, config, 1)
        area, length = mapped_measures(ctx, 0.0)
        hs.append(h)
        area_errors.append(abs(area - EXACT_AREA))
        length_errors.append(abs(length - EXACT_LENGTH))
    return hs, area_errors, length_errors


def check_geometry(levels: range = range(0, 4)) -> SuiteResult:
    """Area and length EOC of the mapped domain at t = 0: >= 1.8 for q = 1, >= 2.6 for q = 2"""

    def check() -> tuple[bool, str]:
        case = build_manufactured_case(Model.HENRY)
        passed = True
        parts = []
        for q, target in ((1, 1.8), (2, 2.6)):
            hs, area_errors, length_errors = _geometry_errors(case, q, levels)
            area_eoc = least_squares_eoc(hs, area_errors)
            length_eoc = least_squares_eoc(hs, length_errors)
            ok = all(e is not None and e >= target for e in (area_eoc, length_eoc))
            passed &= ok
            parts.append(
                f"q={q}: area EOC {format_optional(area_eoc, '.2f')}, "
                f"length EOC {format_optional(length_eoc, '.2f')}"
            )
        return passed, "; ".join(parts)

    return _timed("geometry", check)


def check_jacobian(n_samples: int = 20, seed: int = 0, tol: float = 1e-8) -> SuiteResult:
    """Central differences of the Langmuir residual against the assembled derivative"""

    def check() -> tuple[bool, str]:
        case = build_manufactured_case(Model.LANGMUIR)
        h, dt = schedule(0)
        problem = case.march_problem(build_structured_mesh(h), TimePartition.from_step(case.t_final, dt))
        ctx = build_slab_context(problem, MarchConfig.for_order(1), 1)
        system = SlabSystem(ctx, case.params, Model.LANGMUIR, InitialTrace(case.params.u_B0, case.params.u_S0))
        base = initial_guess(ctx, case.params)
        rng = np.random.default_rng(seed)
        eps = 1e-4
        worst = 0.0
        for _ in range(n_samples):
            state = base + 0.1 * rng.standard_normal(len(base))
            direction = rng.standard_normal(len(base))
            applied = system.jacobian(state) @ direction
            central = (system.residual(state + eps * direction) - system.residual(state - eps * direction)) / (2 * eps)
            worst = max(worst, float(np.linalg.norm(central - applied) / max(np.linalg.norm(applied), 1e-300)))
        return worst <= tol, f"{n_samples} directions on {system.n_dofs} dofs, max relative deviation {worst:.2e}"

    return _timed("jacobian", check)


def check_constant_pair(
    value: float = 0.7, i: int = 1, orders: tuple[int, ...] = (1, 2), tol: float = 1e-8
) -> SuiteResult:
    """u_B = u_S = value stays constant through every slab"""

    def check() -> tuple[bool, str]:
        case = build_constant_case(value)
        h, dt = schedule(i)
        worst = 0.0
        for k in orders:
            problem = case.march_problem(build_structured_mesh(h), TimePartition.from_step(case.t_final, dt))
            solution, _ = march(problem, MarchConfig.for_order(k))
            bulk, surface = solution.end_values()
            worst = max(worst, float(np.max(np.abs(bulk - value))), float(np.max(np.abs(surface - value))))
        return worst <= tol, f"k in {orders}, level {i}, max deviation {worst:.2e}"

    return _timed("constant pair", check)


def check_surface_laplacian(n_angles: int = 16, tol: float = 1e-8) -> SuiteResult:
    """Symbolic Laplace-Beltrami of u_S against a finite difference along the parametrised circle"""

    def check() -> tuple[bool, str]:
        worst = 0.0
        angles = np.linspace(0.0, 2.0 * math.pi, n_angles, endpoint=False)
        for model in Model:
            case = build_manufactured_case(model)
            for t in (0.0, 0.2, 0.5):
                points = circle_centre(t)[0] + RADIUS * np.column_stack([np.cos(angles), np.sin(angles)])
                symbolic = case.surface_laplacian(points, np.full(n_angles, t))
                numeric = angular_laplacian(case.exact_surface, t, angles)
                scale = np.maximum(1.0, np.abs(symbolic))
                worst = max(worst, float(np.max(np.abs(symbolic - numeric) / scale)))
        return worst <= tol, f"{n_angles} angles at 3 times, max deviation {worst:.2e}"

    return _timed("surface laplacian", check)


def run_all(echo: Optional[QuietablePrint] = None) -> list[SuiteResult]:
    if echo is None:
        echo = QuietablePrint(quiet=True)
    results = []
    for suite in (check_cut_rules, check_surface_laplacian, check_geometry, check_jacobian, check_constant_pair):
        result = suite()
        echo(str(result))
        results.append(result)
    return results
