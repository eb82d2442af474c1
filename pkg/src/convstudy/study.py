# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.
"""
Simultaneous h / dt refinement studies of the manufactured problems.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from convstudy.config import H_BASE, ORDERS, OUT_DIR
from convstudy.dump import SolutionDump, dump_name
from convstudy.manufactured import Constants, build_manufactured_case
from convstudy.measure import compute_final_errors
from stfem.assembly import Model
from stfem.mesh import TimePartition, build_structured_mesh
from stfem.solver import MarchConfig, MarchStats, NewtonDiverged, SlabSolution, SlabStats, march
from stfem.utils import QuietablePrint, make_backup, threads_from_env

__all__ = [
    "CSV_HEADER",
    "ConvergenceRow",
    "StudyConfig",
    "schedule",
    "run_level",
    "run_convergence_study",
    "eoc",
    "least_squares_eoc",
    "write_csv",
    "read_csv",
    "format_table",
    "format_optional",
]

CSV_HEADER = ["i", "h", "dt", "err_bulk", "err_surf", "max_newton", "n_dofs", "runtime_s"]


def _opt_float(raw: str) -> Optional[float]:
    return float(raw) if raw.strip() else None


def _fmt_opt(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


@dataclass(frozen=True)
class ConvergenceRow:
    """One refinement level. Errors are None if Newton diverged on that level."""

    i: int
    h: float
    dt: float
    err_bulk: Optional[float]
    err_surf: Optional[float]
    max_newton: int
    n_dofs: int
    runtime_s: float

    def __post_init__(self):
        for err in (self.err_bulk, self.err_surf):
            if err is not None and not err >= 0.0:
                raise ValueError(f"Errors must be >= 0, got {err}")

    @property
    def diverged(self) -> bool:
        return self.err_bulk is None or self.err_surf is None

    def to_record(self) -> list[str]:
        return [
            str(self.i),
            repr(self.h),
            repr(self.dt),
            _fmt_opt(self.err_bulk),
            _fmt_opt(self.err_surf),
            str(self.max_newton),
            str(self.n_dofs),
            repr(self.runtime_s),
        ]

    @classmethod
    def from_record(cls, record: dict[str, str]) -> ConvergenceRow:
        return cls(
            i=int(record["i"]),
            h=float(record["h"]),
            dt=float(record["dt"]),
            err_bulk=_opt_float(record["err_bulk"]),
            err_surf=_opt_float(record["err_surf"]),
            max_newton=int(record["max_newton"]),
            n_dofs=int(record["n_dofs"]),
            runtime_s=float(record["runtime_s"]),
        )


@dataclass(frozen=True)
class StudyConfig:
    """
    :ivar k: k_s = k_t = q_s = q_t
    :ivar march: Overrides passed to MarchConfig (tolerances, sampling, level set order)
    """

    model: Model
    k: int
    imin: int = 0
    imax: int = 3
    out_dir: Path = OUT_DIR
    deterministic: bool = True
    damped: bool = False
    workers: int = 1
    dump: bool = False
    constants: Constants = field(default_factory=Constants)
    march: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.k not in ORDERS:
            raise ValueError(f"k must be one of {ORDERS}, got {self.k}")
        if self.imin < 0 or self.imax < self.imin:
            raise ValueError(f"Need 0 <= imin <= imax, got {self.imin}, {self.imax}")

    @property
    def levels(self) -> range:
        return range(self.imin, self.imax + 1)

    @property
    def csv_path(self) -> Path:
        return self.out_dir / f"convergence_{self.model.value}_k{self.k}.csv"

    def march_config(self) -> MarchConfig:
        return MarchConfig.for_order(
            self.k,
            damped=self.damped,
            deterministic=self.deterministic,
            threads=threads_from_env(),
            **self.march,
        )


def schedule(i: int) -> tuple[float, float]:
    """:return: (h, dt) = (0.2 * 0.5^i, 0.5^(i + 2))"""
    return H_BASE * 0.5**i, 0.5 ** (i + 2)


def run_level(
    config: StudyConfig, i: int, echo: Optional[QuietablePrint] = None
) -> tuple[ConvergenceRow, Optional[SlabSolution]]:
    """
    Marches refinement level i and measures the final-time errors

    :return: (row, last slab solution); the solution is None if Newton diverged
    """
    if echo is None:
        echo = QuietablePrint(quiet=True)
    case = build_manufactured_case(config.model, config.constants)
    h, dt = schedule(i)
    problem = case.march_problem(build_structured_mesh(h), TimePartition.from_step(case.t_final, dt))

    stats = MarchStats()

    def record(_: SlabSolution, slab: SlabStats):
        stats.slabs.append(slab)

    started = time.monotonic()
    try:
        solution, _ = march(problem, config.march_config(), echo=echo, on_slab=record)
    except NewtonDiverged as e:
        runtime = time.monotonic() - started
        echo(f" Newton diverged at level {i}: {e}")
        row = ConvergenceRow(
            i=i,
            h=h,
            dt=dt,
            err_bulk=None,
            err_surf=None,
            max_newton=max(stats.max_newton, e.iterations),
            n_dofs=stats.max_dofs,
            runtime_s=runtime,
        )
        return row, None

    err_bulk, err_surf = compute_final_errors(solution, case.exact_bulk, case.exact_surface)
    runtime = time.monotonic() - started
    row = ConvergenceRow(
        i=i,
        h=h,
        dt=dt,
        err_bulk=err_bulk,
        err_surf=err_surf,
        max_newton=stats.max_newton,
        n_dofs=stats.max_dofs,
        runtime_s=runtime,
    )
    if config.dump:
        config.out_dir.mkdir(parents=True, exist_ok=True)
        dump = SolutionDump.from_solution(solution, config.model.value, config.k, i, err_bulk, err_surf)
        dump.write_to_path(config.out_dir / dump_name(config.model.value, config.k, i))
    return row, solution


def _run_parallel(config: StudyConfig, echo: QuietablePrint) -> list[ConvergenceRow]:
    from convstudy.workers import RunnerPool
    from convstudy.workers.level_runner import LevelRunner

    size = min(config.workers, len(config.levels))
    echo(f"Starting {size} level runners ...", end=" ")
    rows: list[ConvergenceRow] = []
    failures: list[str] = []
    with RunnerPool(size, LevelRunner, config=config) as pool:
        echo("ready")
        # finest levels first, they take longest
        for i in reversed(config.levels):
            pool.submit(i)
        for status, i, payload in pool.collect():
            if status == "OK":
                rows.append(payload)
                echo.marker(str(i))
            else:
                failures.append(f"level {i}: {payload}")
                echo.marker("!")
    echo()
    if failures:
        raise RuntimeError("; ".join(failures))
    return rows


def run_convergence_study(config: StudyConfig, echo: Optional[QuietablePrint] = None) -> list[ConvergenceRow]:
    """
    Runs every level of the study, writes the CSV and prints the EOC table

    :param config: The study
    :param echo: Progress printer
    :return: Rows ordered by i
    """
    if echo is None:
        echo = QuietablePrint(quiet=True)
    config.out_dir.mkdir(parents=True, exist_ok=True)
    started = time.monotonic()

    if config.workers > 1 and len(config.levels) > 1:
        rows = _run_parallel(config, echo)
    else:
        rows = []
        for i in config.levels:
            h, dt = schedule(i)
            echo(f"Level {i} (h={h:g}, dt={dt:g}): ", end="")
            row, _ = run_level(config, i, echo=echo)
            rows.append(row)
            echo(f" {row.runtime_s:,.2f} s")
    rows.sort(key=lambda r: r.i)

    write_csv(rows, config.csv_path)
    echo(format_table(rows))
    echo(f"{len(rows)} levels in {time.monotonic() - started:,.2f} seconds, written to {config.csv_path}")
    return rows


def eoc(errors: Sequence[Optional[float]]) -> list[Optional[float]]:
    """log2(err_i / err_{i+1}) between consecutive levels; None where either error is absent or zero"""
    out: list[Optional[float]] = []
    for coarse, fine in zip(errors[:-1], errors[1:]):
        if coarse is None or fine is None or coarse <= 0.0 or fine <= 0.0:
            out.append(None)
        else:
            out.append(math.log2(coarse / fine))
    return out


def least_squares_eoc(hs: Sequence[float], errors: Sequence[Optional[float]]) -> Optional[float]:
    """Slope of the least-squares line through (log h, log err); None with fewer than two usable levels"""
    pairs = [(h, e) for h, e in zip(hs, errors) if e is not None and e > 0.0]
    if len(pairs) < 2:
        return None
    log_h, log_e = np.log(np.array(pairs)).T
    slope, _ = np.polyfit(log_h, log_e, 1)
    return float(slope)


def write_csv(rows: Sequence[ConvergenceRow], path: Path) -> None:
    """Writes the rows; an existing file is rotated first"""
    make_backup(path)
    with path.open("wt", newline="") as fout:
        writer = csv.writer(fout)
        writer.writerow(CSV_HEADER)
        for row in rows:
            writer.writerow(row.to_record())


def read_csv(path: Path) -> list[ConvergenceRow]:
    with path.open("rt", newline="") as fin:
        reader = csv.DictReader(fin)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"Unexpected header in {path}: {reader.fieldnames}")
        return [ConvergenceRow.from_record(record) for record in reader]


def format_optional(value: Optional[float], spec: str) -> str:
    return "-" if value is None else format(value, spec)


def format_table(rows: Sequence[ConvergenceRow]) -> str:
    """Errors, consecutive EOCs and the least-squares EOC as a text table"""
    bulk = [r.err_bulk for r in rows]
    surf = [r.err_surf for r in rows]
    eoc_bulk = [None, *eoc(bulk)]
    eoc_surf = [None, *eoc(surf)]
    lines = [
        f"{'i':>3} {'h':>10} {'dt':>10} {'err_bulk':>12} {'eoc':>6} "
        f"{'err_surf':>12} {'eoc':>6} {'newton':>6} {'dofs':>8}"
    ]
    for row, eb, es in zip(rows, eoc_bulk, eoc_surf):
        lines.append(
            f"{row.i:>3} {row.h:>10.5g} {row.dt:>10.5g} "
            f"{format_optional(row.err_bulk, '12.4e'):>12} {format_optional(eb, '6.2f'):>6} "
            f"{format_optional(row.err_surf, '12.4e'):>12} {format_optional(es, '6.2f'):>6} "
            f"{row.max_newton:>6} {row.n_dofs:>8}"
        )
    hs = [r.h for r in rows]
    lines.append(
        f"least-squares EOC: bulk {format_optional(least_squares_eoc(hs, bulk), '.2f')}, "
        f"surface {format_optional(least_squares_eoc(hs, surf), '.2f')}"
    )
    return "\n".join(lines)
