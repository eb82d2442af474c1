import numpy as np
import pytest

from convstudy.verify import (
    SuiteResult,
    check_constant_pair,
    check_cut_rules,
    check_jacobian,
    check_surface_laplacian,
    clip_negative,
    polygon_moment,
    run_all,
    segment_moment,
)


def test_clip_negative():
    polygon, segment = clip_negative(np.array([-0.5, 0.5, -0.5]))
    assert len(polygon) == 4
    assert polygon_moment(polygon, 0, 0) == pytest.approx(0.375)
    assert segment_moment(*segment, 0, 0) == pytest.approx(0.5)

    polygon, segment = clip_negative(np.array([1.0, 2.0, 3.0]))
    assert len(polygon) == 0 and segment is None
    polygon, segment = clip_negative(np.array([-1.0, -2.0, -3.0]))
    assert polygon_moment(polygon, 0, 0) == pytest.approx(0.5) and segment is None


def test_moments_of_the_reference_triangle():
    triangle = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    # integral of x^a y^b over the triangle is a! b! / (a + b + 2)!
    assert polygon_moment(triangle, 1, 0) == pytest.approx(1.0 / 6.0)
    assert polygon_moment(triangle, 1, 1) == pytest.approx(1.0 / 24.0)
    assert polygon_moment(triangle, 2, 0) == pytest.approx(1.0 / 12.0)
    assert segment_moment(np.array([0.0, 0.0]), np.array([3.0, 4.0]), 1, 0) == pytest.approx(7.5)


def test_suite_result_line():
    assert str(SuiteResult("cut rules", True, "fine", 1.25)) == "PASS cut rules: fine (1.25 s)"
    assert str(SuiteResult("geometry", False, "off")).startswith("FAIL geometry: off")


def test_cut_rules():
    result = check_cut_rules(n_cases=20)
    assert result.passed, result.detail


def test_surface_laplacian():
    result = check_surface_laplacian(n_angles=8)
    assert result.passed, result.detail


def test_jacobian():
    result = check_jacobian(n_samples=3)
    assert result.passed, result.detail


def test_constant_pair():
    result = check_constant_pair(i=0, orders=(1,))
    assert result.passed, result.detail


def test_failures_are_reported():
    result = check_cut_rules(n_cases=5, tol=-1.0)
    assert not result.passed
    assert "max deviation" in result.detail


def test_run_all(monkeypatch, capsys):
    import convstudy.verify as verify

    calls = []

    def fake(name):
        def suite():
            calls.append(name)
            return SuiteResult(name, name != "b", "")

        return suite

    for attr, name in (
        ("check_cut_rules", "a"),
        ("check_surface_laplacian", "b"),
        ("check_geometry", "c"),
        ("check_jacobian", "d"),
        ("check_constant_pair", "e"),
    ):
        monkeypatch.setattr(verify, attr, fake(name))
    results = run_all()
    assert calls == ["a", "b", "c", "d", "e"]
    assert [r.passed for r in results] == [True, False, True, True, True]
    assert capsys.readouterr().out == ""
