import json

import pytest

from dbcritic.experiments import _jsonable
from dbcritic.props import SUITES, run_suites


@pytest.mark.parametrize("name", ["bridge", "critic", "envs"])
def test_suite_passes(name):
    results = SUITES[name](0)
    assert results
    failed = [r.name for r in results if not r.passed]
    assert not failed


def test_run_suites_report_is_json():
    report = run_suites(["bridge", "nn"], seed=1)
    assert report["passed"]
    text = json.dumps(report, default=_jsonable)
    assert "gradient_check_tanh" in text


def test_unknown_suite():
    with pytest.raises(KeyError):
        run_suites(["nope"])
