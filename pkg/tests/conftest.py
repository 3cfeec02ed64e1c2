import numpy as np
import pytest

from cia import tensor_core as tc


def rel_err(a, b):
    a, b = np.asarray(a, np.float64).ravel(), np.asarray(b, np.float64).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


@pytest.fixture(params=["python", "native"])
def backend(request):
    if request.param == "native":
        try:
            from cia.tensor_core import _kernels  # noqa: F401
        except ImportError:
            pytest.skip("compiled kernels not built")
    prev = tc.use_backend(request.param)
    yield request.param
    tc.use_backend(prev)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[k])
