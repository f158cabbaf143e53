import pytest

from ic_align.selftest import SUITES, SuiteResult, run_selftest, run_suite


@pytest.mark.parametrize("name", sorted(SUITES))
def test_suite_passes(name):
    result = run_suite(name, seed=0)
    assert result.passed, result.line()
    assert result.line().startswith("ok")


def test_other_seed():
    assert run_suite("se3_roundtrip", seed=123).passed


def test_unknown_suite():
    with pytest.raises(KeyError):
        run_suite("nonsense")


def test_runs_requested_suites_in_order():
    names = [r.name for r in run_selftest(["default_constants", "affine_group"])]
    assert names == ["default_constants", "affine_group"]


def test_crashing_suite_is_reported_as_failure(monkeypatch):
    def boom(rng):
        raise RuntimeError("broken")

    monkeypatch.setitem(SUITES, "boom", boom)
    result = run_suite("boom")
    assert not result.passed
    assert result.line().startswith("FAIL")
    assert "RuntimeError: broken" in result.detail


def test_line_format():
    line = SuiteResult("demo", True, 1e-12, 1e-9, 10, 0.5).line()
    assert line.startswith("ok   demo")
    assert "max_error=1.000e-12" in line
