import numpy as np
import pytest

from fedprof.nn_core import ModelSpec, init_model


@pytest.fixture
def small_spec():
    return ModelSpec((4, 6, 3), ("tanh",), "softmax_nll")


@pytest.fixture
def small_model(small_spec):
    return init_model(small_spec, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_RESULTS = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion."""

    def record(number, ok, detail):
        line = f"ACCEPTANCE {number:>2}: {'PASS' if ok else 'FAIL'} - {detail}"
        ACCEPTANCE_RESULTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
