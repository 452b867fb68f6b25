import numpy as np
import pytest
from hypothesis import settings

from softspace import dynamics as dy
from softspace import fem, rom

settings.register_profile("default", max_examples=25, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def bar_full():
    mesh = fem.build_mesh({"shape": "bar", "nx": 10, "ny": 5, "spacing": 0.05, "elevation": 0.05})
    return fem.assemble(mesh, fem.Material())


@pytest.fixture(scope="session")
def bar_basis(bar_full):
    return fem.modal_basis(bar_full, 10)


@pytest.fixture(scope="session")
def bar_rom(bar_full, bar_basis):
    return rom.reduce(bar_full, bar_basis)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def free_env():
    return dy.Environment.free_space(2)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
