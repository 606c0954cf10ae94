import numpy as np
import pytest

from demblind import _backend, covmodel, likelihood

BACKENDS = ["python"] + (["cython"] if _backend.compiled_kernels is not None else [])


@pytest.fixture(params=BACKENDS)
def backend(request, monkeypatch):
    """Run a test once per available kernel implementation."""
    k = _backend.python_kernels if request.param == "python" else _backend.compiled_kernels
    monkeypatch.setattr(covmodel, "kernels", k)
    monkeypatch.setattr(likelihood, "kernels", k)
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_theta(rng, shape="gaussian"):
    return covmodel.Theta.from_values(rng.uniform(0.1, 5.0), rng.uniform(0.15, 0.85),
                                      rng.uniform(0.1, 5.0), rng.uniform(0.1, 2.0), shape)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
