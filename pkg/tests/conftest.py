import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, print_blob=True)
settings.load_profile("default")


@pytest.fixture
def rng():
    from vtslab.numerics import RngState
    return RngState(1234)


def assert_grad_matches(f, x, tol=1e-6, h=1e-5):
    """Backprop through ``f(Node) -> scalar Node`` vs central differences at ``x``."""
    from vtslab import numerics as nx
    node = nx.param(x)
    nx.backward(f(node))
    fd = nx.fd_gradient(lambda v: float(f(nx.const(v)).value), x, h)
    err = nx.rel_error(node.grad, fd)
    assert err < tol, f"relative error {err:.3e}"
    return err


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import LINES
    if LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])
