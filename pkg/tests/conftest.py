import numpy as np
import pytest

from proteus.autodiff import kernels, set_debug, set_default_dtype, set_deterministic


@pytest.fixture(autouse=True)
def _reset_state():
    set_default_dtype(np.float64)
    set_debug(False)
    set_deterministic(False)
    backend = kernels.backend_name()
    yield
    kernels.set_backend(backend)
    set_default_dtype(np.float64)
    set_debug(False)
    set_deterministic(False)


@pytest.fixture(params=sorted(kernels.BACKENDS))
def backend(request):
    kernels.set_backend(request.param)
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance") or __import__("sys").modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
