import pytest

from dampexp.core import Params, PressureLaw, XiGrid, recommended_grid
from dampexp.hierarchy import build_corrections
from dampexp.profiles import solve_wave


@pytest.fixture(scope="session")
def gamma_law():
    return PressureLaw.gamma_law()


@pytest.fixture(scope="session")
def profile_05(gamma_law):
    return solve_wave(Params(0.5), gamma_law, XiGrid(12.0, 2048))


@pytest.fixture(scope="session")
def corrections_05(profile_05):
    return build_corrections(profile_05)


@pytest.fixture(scope="session")
def linear_profile_05():
    return solve_wave(Params(0.5, 0.975, 1.025), PressureLaw.linear(1.0), XiGrid(12.0, 2048))


@pytest.fixture(scope="session")
def corrections_by_lambda(gamma_law):
    cache = {}

    def get(lam, method="colloc"):
        if (lam, method) not in cache:
            prof = solve_wave(Params(lam), gamma_law, recommended_grid(lam))
            cache[lam, method] = build_corrections(prof, method=method)
        return cache[lam, method]

    return get


_ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE, key=lambda item: item[0]):
            terminalreporter.write_line(line)
