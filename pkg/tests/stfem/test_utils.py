import pytest

from stfem.utils import THREADS_ENV, QuietablePrint, backup_path, make_backup, threads_from_env


def test_make_backup_rotates(tmp_path):
    target = tmp_path / "convergence.csv"
    make_backup(target)
    assert list(tmp_path.iterdir()) == []

    for content in ("one", "two", "three"):
        target.write_text(content)
        make_backup(target)
    assert target.read_text() == "three"
    assert (tmp_path / "convergence.prev1.csv").read_text() == "three"
    assert (tmp_path / "convergence.prev2.csv").read_text() == "two"
    assert not (tmp_path / "convergence.prev0.csv").exists()
    assert not (tmp_path / "convergence.prev3.csv").exists()


def test_make_backup_result(tmp_path):
    target = tmp_path / "run.csv"
    assert make_backup(target) is None
    target.write_text("x")
    assert make_backup(target, levels=0) is None
    assert make_backup(target) == backup_path(target, 1) == tmp_path / "run.prev1.csv"


@pytest.mark.parametrize("raw, expected", [("", 1), ("  ", 1), ("4", 4), ("0", 1), ("-3", 1)])
def test_threads_from_env(monkeypatch, raw: str, expected: int):
    monkeypatch.setenv(THREADS_ENV, raw)
    assert threads_from_env() == expected


def test_threads_from_env_default(monkeypatch):
    monkeypatch.delenv(THREADS_ENV, raising=False)
    assert threads_from_env(3) == 3


def test_threads_from_env_garbage(monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "many")
    with pytest.raises(ValueError):
        threads_from_env()


def test_quietable_print(capsys):
    echo = QuietablePrint()
    echo("hello")
    echo.marker(".")
    echo.marker("!")
    assert capsys.readouterr().out == "hello\n.!"
    echo.quiet = True
    echo("hidden")
    echo.marker(".")
    assert capsys.readouterr().out == ""
