import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class _Criterion:
    def __init__(self, results, number, name):
        self.results, self.number, self.name = results, number, name

    def report(self, passed, detail=""):
        """Record the outcome; returns ``passed`` so it can feed an assert."""
        self.results[self.number] = (self.name, bool(passed), detail)
        return passed


@pytest.fixture
def criterion(request):
    """Recorder for one acceptance criterion, named by the test's ``criterion`` mark."""
    mark = request.node.get_closest_marker("criterion")
    number, name = mark.args
    results = request.config.stash.setdefault(_CRITERIA, {})
    rec = _Criterion(results, number, name)
    yield rec
    # a test that raised before reporting still gets a line
    results.setdefault(number, (name, False, "error before the check completed"))


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, name): acceptance criterion under test")


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_CRITERIA, {})
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(results):
        name, passed, detail = results[number]
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {name}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)
