import importlib

import pytest

import convstudy.__main__ as cli
from convstudy.study import ConvergenceRow
from convstudy.verify import SuiteResult
from stfem.solver import NewtonDiverged


def _row(i: int, err=0.01) -> ConvergenceRow:
    return ConvergenceRow(i=i, h=0.2, dt=0.25, err_bulk=err, err_surf=err, max_newton=1, n_dofs=42, runtime_s=0.1)


def test_single(monkeypatch, capsys):
    seen = {}

    def fake_run_level(config, i, echo=None):
        seen["config"], seen["i"] = config, i
        return _row(i), None

    monkeypatch.setattr(cli, "run_level", fake_run_level)
    assert cli.cli_main(["single", "--model", "langmuir", "--k", "2", "--i", "1", "--quiet"]) == 0
    out = capsys.readouterr().out
    assert "err_bulk   = 1.000000e-02" in out
    assert "n_dofs     = 42" in out
    assert seen["i"] == 1 and seen["config"].k == 2 and seen["config"].model.value == "langmuir"
    assert seen["config"].deterministic


def test_single_diverged(monkeypatch, capsys):
    monkeypatch.setattr(cli, "run_level", lambda config, i, echo=None: (_row(i, err=None), None))
    assert cli.cli_main(["single", "--quiet"]) == 2
    assert "diverged" in capsys.readouterr().out


def test_study(monkeypatch, tmp_path):
    seen = {}

    def fake_study(config, echo=None):
        seen["config"] = config
        return [_row(0, 0.04), _row(1, 0.01)]

    monkeypatch.setattr(cli, "run_convergence_study", fake_study)
    argv = ["study", "--imax", "1", "--out", str(tmp_path), "--workers", "2", "--dump", "--quiet"]
    assert cli.cli_main(argv) == 0
    config = seen["config"]
    assert (config.imin, config.imax, config.workers, config.dump, config.out_dir) == (0, 1, 2, True, tmp_path)


def test_study_with_diverged_level(monkeypatch, tmp_path):
    monkeypatch.setattr(cli, "run_convergence_study", lambda config, echo=None: [_row(0), _row(1, err=None)])
    assert cli.cli_main(["study", "--imax", "1", "--out", str(tmp_path), "--quiet"]) == 2


@pytest.mark.parametrize("passed, code", [((True, True), 0), ((True, False), 1)])
def test_verify(monkeypatch, capsys, passed, code):
    results = [SuiteResult(f"s{n}", ok, "") for n, ok in enumerate(passed)]
    monkeypatch.setattr(cli, "run_all", lambda echo=None: results)
    assert cli.cli_main(["verify", "--quiet"]) == code
    summary = capsys.readouterr().out
    assert f"{sum(passed)}/2 checks passed" in summary


def test_errors_become_exit_codes(monkeypatch, capsys):
    def diverging(opts, echo):
        raise NewtonDiverged("stuck", slab=2, iterations=25)

    def broken(opts, echo):
        raise RuntimeError("boom")

    monkeypatch.setitem(cli.COMMANDS, "verify", diverging)
    assert cli.cli_main(["verify"]) == 2
    assert "slab 2" in capsys.readouterr().err

    monkeypatch.setitem(cli.COMMANDS, "verify", broken)
    assert cli.cli_main(["verify"]) == 1
    assert "RuntimeError: boom" in capsys.readouterr().err


def test_bad_arguments_exit_with_usage():
    with pytest.raises(SystemExit) as info:
        cli.cli_main(["single", "--k", "7"])
    assert info.value.code == 2


@pytest.mark.parametrize("name", ["convstudy.__main__", "convstudy.config", "convstudy.measure"])
def test_module_docstrings(name: str):
    assert importlib.import_module(name).__doc__.strip()
