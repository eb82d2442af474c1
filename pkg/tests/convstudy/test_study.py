import math

import numpy as np
import pytest

from convstudy.dump import SolutionDump, dump_name
from convstudy.manufactured import Constants, build_manufactured_case
from convstudy.measure import compute_final_errors
from convstudy.study import (
    CSV_HEADER,
    ConvergenceRow,
    StudyConfig,
    eoc,
    format_table,
    least_squares_eoc,
    read_csv,
    run_convergence_study,
    run_level,
    schedule,
    write_csv,
)
from stfem.assembly import Model
from stfem.mesh import TimePartition, build_structured_mesh
from stfem.solver import march
from stfem.utils import THREADS_ENV


def _row(i: int, err_bulk=None, err_surf=None) -> ConvergenceRow:
    h, dt = schedule(i)
    return ConvergenceRow(
        i=i, h=h, dt=dt, err_bulk=err_bulk, err_surf=err_surf, max_newton=1, n_dofs=100 * (i + 1), runtime_s=0.5
    )


def test_schedule():
    assert schedule(0) == (0.2, 0.25)
    assert schedule(2) == pytest.approx((0.05, 0.0625))


def test_eoc():
    assert eoc([1.0, 0.25, 0.0625]) == pytest.approx([2.0, 2.0])
    assert eoc([1.0, None, 0.125]) == [None, None]
    assert eoc([1.0, 0.0]) == [None]
    assert eoc([0.3]) == []


def test_least_squares_eoc():
    hs = [schedule(i)[0] for i in range(4)]
    assert least_squares_eoc(hs, [3.0 * h**3 for h in hs]) == pytest.approx(3.0)
    assert least_squares_eoc(hs, [3.0 * hs[0] ** 2, None, 3.0 * hs[2] ** 2, 0.0]) == pytest.approx(2.0)
    assert least_squares_eoc(hs[:1], [1.0]) is None


def test_row_validation():
    with pytest.raises(ValueError):
        _row(0, err_bulk=-1.0, err_surf=0.0)
    with pytest.raises(ValueError):
        _row(0, err_bulk=math.nan, err_surf=0.0)
    assert _row(0).diverged
    assert not _row(0, 0.1, 0.2).diverged


def test_csv_round_trip(tmp_path):
    path = tmp_path / "convergence_henry_k1.csv"
    rows = [_row(0, 0.1, 0.2), _row(1, 0.1 / 3, 0.05), _row(2)]
    write_csv(rows, path)
    assert path.read_text().splitlines()[0] == ",".join(CSV_HEADER)
    assert read_csv(path) == rows

    write_csv(rows[:1], path)
    assert read_csv(path) == rows[:1]
    assert read_csv(tmp_path / "convergence_henry_k1.prev1.csv") == rows
    assert not (tmp_path / "convergence_henry_k1.prev2.csv").exists()


def test_csv_header_is_checked(tmp_path):
    path = tmp_path / "other.csv"
    path.write_text("i,h\n0,0.2\n")
    with pytest.raises(ValueError):
        read_csv(path)


def test_format_table():
    table = format_table([_row(0, 0.16, 0.2), _row(1, 0.04, 0.1), _row(2)])
    lines = table.splitlines()
    assert len(lines) == 5
    assert "2.00" in lines[2] and "1.00" in lines[2]
    assert lines[3].count("-") >= 4
    assert lines[-1].startswith("least-squares EOC: bulk 2.00, surface 1.00")


def test_study_config(tmp_path, monkeypatch):
    config = StudyConfig(model=Model.LANGMUIR, k=2, imin=1, imax=3, out_dir=tmp_path, march={"newton_tol": 1e-11})
    assert list(config.levels) == [1, 2, 3]
    assert config.csv_path == tmp_path / "convergence_langmuir_k2.csv"
    monkeypatch.setenv(THREADS_ENV, "3")
    march_config = config.march_config()
    assert (march_config.k_s, march_config.q_t, march_config.threads) == (2, 2, 3)
    assert march_config.newton_tol == 1e-11
    assert march_config.deterministic
    with pytest.raises(ValueError):
        StudyConfig(model=Model.HENRY, k=5)
    with pytest.raises(ValueError):
        StudyConfig(model=Model.HENRY, k=1, imin=2, imax=1)


def test_run_level_with_dump(tmp_path):
    config = StudyConfig(model=Model.HENRY, k=1, imin=0, imax=0, out_dir=tmp_path, dump=True)
    row, solution = run_level(config, 0)
    assert solution is not None
    assert (row.i, row.h, row.dt, row.max_newton) == (0, 0.2, 0.25, 1)
    assert 0.0 < row.err_bulk < 0.5 and 0.0 < row.err_surf < 1.0
    assert row.n_dofs >= solution.context.n_dofs

    dump = SolutionDump.new_from_path(tmp_path / dump_name("henry", 1, 0))
    assert (dump.model, dump.k, dump.i, dump.t_final) == ("henry", 1, 0, 0.5)
    assert dump.err_bulk == row.err_bulk
    assert np.array_equal(dump.coefficients, solution.coefficients)
    assert dump.bulk_nodes.shape == (len(dump.bulk_values), 2)


def test_run_level_records_divergence(tmp_path):
    config = StudyConfig(model=Model.LANGMUIR, k=1, out_dir=tmp_path, march={"newton_maxiter": 1}, dump=True)
    row, solution = run_level(config, 0)
    assert solution is None
    assert row.diverged
    assert row.max_newton >= 1
    assert not list(tmp_path.iterdir())


def test_constants_reach_the_problem(tmp_path):
    base = StudyConfig(model=Model.HENRY, k=1, out_dir=tmp_path)
    slow = StudyConfig(model=Model.HENRY, k=1, out_dir=tmp_path, constants=Constants(k_B=0.05))
    row_base, _ = run_level(base, 0)
    row_slow, _ = run_level(slow, 0)
    assert row_base.err_bulk != row_slow.err_bulk


def test_sequential_study(tmp_path):
    config = StudyConfig(model=Model.HENRY, k=1, imin=0, imax=1, out_dir=tmp_path)
    rows = run_convergence_study(config)
    assert [r.i for r in rows] == [0, 1]
    assert read_csv(config.csv_path) == rows
    assert rows[1].err_bulk < rows[0].err_bulk


CONVERGENCE_CASES = [
    pytest.param(Model.HENRY, 1, range(1, 5), 1.8, id="henry-k1"),
    pytest.param(Model.HENRY, 2, range(0, 4), 2.6, id="henry-k2"),
    pytest.param(Model.LANGMUIR, 1, range(1, 5), 1.8, id="langmuir-k1"),
    pytest.param(Model.LANGMUIR, 2, range(0, 4), 2.6, id="langmuir-k2"),
]


@pytest.mark.slow
@pytest.mark.parametrize(("model", "k", "levels", "rate"), CONVERGENCE_CASES)
def test_convergence_rates(tmp_path, model: Model, k: int, levels: range, rate: float):
    config = StudyConfig(model=model, k=k, imin=levels[0], imax=levels[-1], out_dir=tmp_path)
    case = build_manufactured_case(model)
    hs, bulk, surf = [], [], []
    for i in levels:
        h, dt = schedule(i)
        problem = case.march_problem(build_structured_mesh(h), TimePartition.from_step(case.t_final, dt))
        solution, stats = march(problem, config.march_config())
        err_bulk, err_surf = compute_final_errors(solution, case.exact_bulk, case.exact_surface)
        hs.append(h)
        bulk.append(err_bulk)
        surf.append(err_surf)
        assert all(s.increment < 1e-9 for s in stats.slabs), f"level {i}"
        if i >= 2:
            assert stats.max_newton <= 10, f"level {i}"
    assert least_squares_eoc(hs, bulk) >= rate, bulk
    assert least_squares_eoc(hs, surf) >= rate, surf


def _without_runtime(path) -> list[str]:
    column = CSV_HEADER.index("runtime_s")
    lines = path.read_text().splitlines()
    return [",".join(v for j, v in enumerate(line.split(",")) if j != column) for line in lines]


@pytest.mark.slow
def test_study_csv_is_reproducible(tmp_path, monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "2")
    first = StudyConfig(model=Model.HENRY, k=1, imin=0, imax=3, out_dir=tmp_path / "first")
    second = StudyConfig(model=Model.HENRY, k=1, imin=0, imax=3, out_dir=tmp_path / "second")
    run_convergence_study(first)
    run_convergence_study(second)
    assert _without_runtime(first.csv_path) == _without_runtime(second.csv_path)
