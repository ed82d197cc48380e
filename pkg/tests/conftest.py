import pytest

from tlbc import scenario, sysid
from tlbc.circuit import ConverterParams


@pytest.fixture(scope="session")
def params():
    return ConverterParams()


@pytest.fixture(scope="session")
def builtin_runs(params):
    """Every builtin scenario, simulated once per session."""
    scs = scenario.builtin_scenarios()
    return {name: (sc, scenario.run(sc, params)) for name, sc in scs.items()}


@pytest.fixture(scope="session")
def s1_experiments(params):
    op = sysid.operating_points()["S1"]
    return {ch: sysid.generate_experiment(params, op, ch) for ch in sysid.CHANNELS}


_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    def record(label, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {label}: {detail}"
        print(line)
        request.config.stash[_VERDICTS].append(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
