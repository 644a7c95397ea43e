import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dampexp.core import (DomainError, Params, PressureLaw, XiGrid, hierarchy_constants,
                          k_thresholds, pressure_eval)


def test_gamma_law_values_at_one():
    p, dp, d2p = pressure_eval(PressureLaw.gamma_law(1.4), 1.0)
    assert p == pytest.approx(1.0, abs=1e-15)
    assert dp == pytest.approx(1.4, abs=1e-15)
    assert d2p == pytest.approx(0.56, abs=1e-15)


def test_linear_law_values():
    p, dp, d2p = pressure_eval(PressureLaw.linear(1.0), 2.0)
    assert (p, dp, d2p) == (2.0, 1.0, 0.0)


def test_gamma_law_rejects_zero_density():
    with pytest.raises(DomainError, match="interval"):
        pressure_eval(PressureLaw.gamma_law(), 0.0)


def test_tabulated_law_matches_source_and_rejects_outside():
    rho = np.linspace(0.5, 1.5, 30)
    law = PressureLaw.tabulated(rho, rho**1.4)
    p, dp, _ = pressure_eval(law, np.array([0.8, 1.0, 1.2]))
    assert np.allclose(p, np.array([0.8, 1.0, 1.2]) ** 1.4, rtol=1e-9)
    assert np.allclose(dp, 1.4 * np.array([0.8, 1.0, 1.2]) ** 0.4, rtol=1e-6)
    with pytest.raises(DomainError):
        law(2.0)


@pytest.mark.parametrize("law", [PressureLaw.gamma_law(1.4), PressureLaw.gamma_law(2.0, 0.5),
                                 PressureLaw.linear(2.0)])
def test_pressure_derivatives_match_central_differences(law):
    rho = np.linspace(0.6, 1.6, 11)
    h = 1e-5
    _, dp, d2p = pressure_eval(law, rho)
    fd1 = (law(rho + h) - law(rho - h)) / (2 * h)
    fd2 = (law.derivative(rho + h, 1) - law.derivative(rho - h, 1)) / (2 * h)
    assert np.all(np.abs(fd1 - dp) <= 1e-6 * np.abs(dp))
    scale = np.maximum(np.abs(d2p), 1e-12)
    assert np.all(np.abs(fd2 - d2p) <= 1e-6 * scale + 1e-9)


@pytest.mark.parametrize("lam, expected", [(0.5, (2.25, 2, False)),
                                           (Fraction(5, 11), (2.0, 1, True)),
                                           (0.2, (1.125, 1, False))])
def test_k_thresholds_examples(lam, expected):
    k, k0, flag = k_thresholds(lam)
    assert k == pytest.approx(expected[0], abs=1e-12)
    assert (k0, flag) == expected[1:]


def test_k_of_one_seventh_is_exactly_one():
    k, k0, flag = k_thresholds(Fraction(1, 7))
    assert k == 1 and k0 == 0 and flag


@pytest.mark.parametrize("lam", [0.0, 1.0, -0.1, 1.2])
def test_lambda_outside_unit_interval_rejected(lam):
    with pytest.raises(DomainError):
        k_thresholds(lam)
    with pytest.raises(DomainError):
        Params(lam)


@given(st.floats(min_value=1e-3, max_value=0.999))
def test_k0_positive_iff_lambda_above_one_seventh(lam):
    k0 = k_thresholds(lam)[1]
    if abs(lam - 1 / 7) > 1e-9:
        assert (k0 >= 1) == (lam > 1 / 7)


def test_c1_first_is_minus_two_lambda_random():
    rng = np.random.default_rng(7)
    for lam in rng.uniform(1e-4, 1 - 1e-4, 10_000):
        c = hierarchy_constants(lam, 1)
        assert abs(c.c1_(1) + 2 * lam) <= 4 * np.finfo(float).eps


def test_constants_at_one_half():
    c = hierarchy_constants(0.5, 2)
    assert c.c1_(1) == pytest.approx(-1.0) and c.c2_(1) == pytest.approx(0.75)
    assert c.c1_(2) == pytest.approx(-0.5) and c.c2_(2) == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("lam", np.round(np.arange(0.15, 0.951, 0.05), 2))
def test_constant_ratios_finite_up_to_k0(lam):
    k0 = k_thresholds(lam)[1]
    if k0 == 0:
        pytest.skip("no corrections below 1/7")
    c = hierarchy_constants(lam, k0)
    for i in range(1, k0 + 1):
        assert c.c1_(i) < 0
        assert math.isfinite(c.c2_(i) / c.c1_(i))


@settings(max_examples=50)
@given(st.floats(0.5, 30.0), st.integers(8, 512))
def test_xi_grid_symmetric(L, half):
    g = XiGrid(L, 2 * half)
    xi = g.nodes
    assert xi[0] == -L and xi[-1] == L
    assert np.all(np.diff(xi) > 0)
    assert np.array_equal(xi, -xi[::-1])


def test_params_derived_quantities():
    p = Params(0.3, 1.0, 1.1)
    assert p.sigma == pytest.approx(0.7, abs=0)
    assert p.delta == pytest.approx(0.1)
    assert p.a == pytest.approx(0.65)
