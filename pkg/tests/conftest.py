import pytest

from tcmcap import solver

ACTIVATIONS = ("relu", "quadratic", "erf", "tanh")
LEVELS = ("1", "2-partial", "2-full", "3-full")

_LOG = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_LOG] = {}


@pytest.fixture(scope="session")
def acceptance_log(pytestconfig):
    """Criterion number -> (passed, detail); printed after the run."""
    return pytestconfig.stash[_LOG]


@pytest.fixture(scope="session")
def sweep_reports():
    """Every (activation, level) capacity, solved once per session."""
    return solver.sweep(ACTIVATIONS, LEVELS)


def pytest_terminal_summary(terminalreporter, config):
    log = config.stash.get(_LOG, {})
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(log):
        ok, detail = log[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
