"""
Tests for the built-in property checks.
"""

import pytest

import selftest
from selftest import AVAILABLE_CHECKS, run_selftest


class TestRunSelftest:
    @pytest.mark.parametrize("name", sorted(AVAILABLE_CHECKS))
    def test_check_passes(self, name):
        (result,) = run_selftest(seed=0, names=[name])
        assert result.passed, result.detail

    def test_all_checks_by_default(self):
        results = run_selftest(seed=1, names=None)
        assert [r.name for r in results] == list(AVAILABLE_CHECKS)

    def test_unknown_check(self):
        with pytest.raises(ValueError, match="Unknown check"):
            run_selftest(names=["nothing"])

    def test_exception_reported_as_failure(self, mocker):
        mocker.patch.dict(selftest.AVAILABLE_CHECKS, {"range_coder": mocker.Mock(side_effect=RuntimeError("boom"))})
        (result,) = run_selftest(names=["range_coder"])
        assert not result.passed
        assert result.detail == "RuntimeError: boom"
