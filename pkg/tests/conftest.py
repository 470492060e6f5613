import os
from contextlib import contextmanager

import numpy as np
import pytest

from ffbsde import AffineProblemSpec, ProblemSpec

CONFIG_DIR = os.path.join(os.path.dirname(__file__), os.pardir, "demos", "configs")

_ACCEPTANCE = {}


def config_path(name):
    return os.path.abspath(os.path.join(CONFIG_DIR, name))


def make_spec(B=None, Sigma=None, F=None, G=None, n=1, m=1, d=1, T=0.5, x0=None, **kw):
    """ProblemSpec with zero defaults for every coefficient left out."""
    zero = lambda *args: 0.0  # noqa: E731
    x0 = np.ones(n) if x0 is None else x0
    return ProblemSpec(n=n, m=m, d=d, T=T, x0=x0, B=B or zero, Sigma=Sigma or zero,
                       F=F or zero, G=G or zero, **kw)


def benchmark_affine(**changes):
    """Anchor-dependent affine instance shared by several tests."""
    params = dict(b=0.3, bbar=-0.5, sigma=0.5, f1=0.4, f2=0.3, f3=-0.2, f4=lambda t: t,
                  g1=0.8, g2=0.3, g3=0.2, g4=lambda t: 1.0 + t, x0=1.0, T=0.5)
    params.update(changes)
    return AffineProblemSpec(**params)


def anchor_free_affine(**changes):
    params = dict(b=0.2, bbar=-0.5, sigma=0.3, f1=0.3, f2=0.2, f3=-0.2, f4=lambda t: t,
                  g1=0.5, g4=lambda t: 1.0 + t, x0=1.0, T=0.5)
    params.update(changes)
    return AffineProblemSpec(**params)


@pytest.fixture
def criterion():
    """Context manager recording one acceptance verdict line."""

    @contextmanager
    def record(number, title):
        info = {}
        try:
            yield info
        except BaseException:
            _ACCEPTANCE[number] = ("FAIL", title, info)
            raise
        _ACCEPTANCE[number] = ("PASS", title, info)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        verdict, title, info = _ACCEPTANCE[number]
        detail = ", ".join(f"{k}={v}" for k, v in info.items())
        terminalreporter.write_line(f"criterion {number:2d} {verdict}: {title}"
                                    + (f" ({detail})" if detail else ""))
