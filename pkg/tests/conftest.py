import numpy as np
import pytest
from hypothesis import settings

from setlearn.diffcore import ParamVector
from setlearn.setfn import Arch, model_init

settings.register_profile("default", deadline=None, max_examples=30)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model(seed=0, d_f=2, depth=2, width=6, scale=1.0):
    m = model_init(Arch(d_f, depth, width, width), seed)
    return m.with_params(m.params * scale) if scale != 1.0 else m


def modular_model(seed=0, d_f=2, width=6):
    """A model whose ReLUs never switch off on small sets, so F is modular."""
    m = tiny_model(seed, d_f=d_f, width=width)
    params = ParamVector((k, v + 100.0 if k == "rho0.b" else v) for k, v in m.params.items())
    return m.with_params(params)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
