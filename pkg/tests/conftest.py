import numpy as np
import pytest

from roughsde.roughpath import lift_smooth
from roughsde.timegrid import make_grid


def sin_path(freq=1.0, dim=1):
    def path(t):
        k = np.arange(1, dim + 1)
        return np.sin(2 * np.pi * freq * np.asarray(t)[:, None] * k) / k
    return path


@pytest.fixture
def grid64():
    return make_grid(1.0, 64)


@pytest.fixture
def grid256():
    return make_grid(1.0, 256)


@pytest.fixture
def smooth_rp(grid256):
    return lift_smooth(sin_path(), grid256, refine=16)


@pytest.fixture
def smooth_rp2(grid64):
    return lift_smooth(sin_path(dim=2), grid64, refine=16)


# one PASS/FAIL line per acceptance criterion in the terminal summary
_CRITERIA: dict[int, list] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    n = mark.args[0]
    _CRITERIA.setdefault(n, []).append((item.name, rep.passed))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        runs = _CRITERIA[n]
        ok = all(p for _, p in runs)
        names = ", ".join(name for name, _ in runs)
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  ({names})")
