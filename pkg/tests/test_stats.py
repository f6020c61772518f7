import math

import numpy as np
import pytest

from staygen.errors import DomainError
from staygen.stats import (
    chi2_sf,
    pearson_r,
    pearson_r_pvalue,
    regularized_beta,
    regularized_gamma_p,
    regularized_gamma_q,
    student_t_sf,
)


def simpson(f, a, b, n=20000):
    """Composite Simpson quadrature (independent oracle)."""
    if n % 2:
        n += 1
    xs = np.linspace(a, b, n + 1)
    ys = np.array([f(x) for x in xs])
    h = (b - a) / n
    return h / 3 * (ys[0] + ys[-1] + 4 * ys[1:-1:2].sum() + 2 * ys[2:-2:2].sum())


def chi2_pdf(x, df):
    k = df / 2.0
    return x ** (k - 1) * math.exp(-x / 2.0) / (2.0**k * math.gamma(k))


def chi2_cdf_quadrature(x, df):
    # substitute x = u^2 so the df=1 integrand is smooth at the origin:
    # cdf = int_0^sqrt(x) 2u * pdf(u^2) du
    k = df / 2.0
    norm = 2.0**k * math.gamma(k)

    def g(u):
        return 2.0 * u ** (2.0 * k - 1.0) * math.exp(-u * u / 2.0) / norm

    return simpson(g, 0.0, math.sqrt(x))


def t_pdf(x, df):
    c = math.gamma((df + 1) / 2) / (math.sqrt(df * math.pi) * math.gamma(df / 2))
    return c * (1 + x * x / df) ** (-(df + 1) / 2)


def test_chi2_sf_worked_example():
    # survival at the statistic that sits exactly at alpha = 0.05 for df=5
    p = chi2_sf(11.0705, 5)
    assert abs(p - 0.0500) < 5e-4
    oracle = 1.0 - chi2_cdf_quadrature(11.0705, 5)
    assert abs(p - oracle) < 1e-9


@pytest.mark.parametrize("df", [1, 2, 3, 5, 10, 40])
@pytest.mark.parametrize("x", [0.1, 1.0, 4.2, 11.07, 25.0])
def test_chi2_sf_vs_quadrature(df, x):
    oracle = 1.0 - chi2_cdf_quadrature(x, df)
    assert abs(chi2_sf(x, df) - oracle) < 1e-8


def test_chi2_sf_bounds_and_monotonicity():
    assert chi2_sf(-1.0, 3) == 1.0
    assert chi2_sf(0.0, 3) == 1.0
    values = [chi2_sf(x, 5) for x in np.linspace(0, 40, 50)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert all(0.0 <= v <= 1.0 for v in values)


def test_gamma_p_q_complementary():
    for s in (0.5, 1.0, 2.5, 7.0):
        for x in (0.1, 1.0, 3.0, 12.0):
            assert abs(regularized_gamma_p(s, x) + regularized_gamma_q(s, x) - 1.0) < 1e-12


def test_gamma_domain_errors():
    with pytest.raises(DomainError):
        regularized_gamma_p(0.0, 1.0)
    with pytest.raises(DomainError):
        regularized_gamma_q(1.0, -1.0)


def test_student_t_sf_vs_quadrature():
    for df in (3, 10, 30):
        for t in (0.0, 0.5, 2.0, 4.0):
            oracle = 0.5 - simpson(lambda x: t_pdf(x, df), 0.0, t)
            assert abs(student_t_sf(t, df) - oracle) < 1e-8
    assert abs(student_t_sf(-2.0, 10) - (1.0 - student_t_sf(2.0, 10))) < 1e-12


def test_regularized_beta_edges():
    assert regularized_beta(0.0, 2.0, 3.0) == 0.0
    assert regularized_beta(1.0, 2.0, 3.0) == 1.0
    # I_x(1,1) = x
    for x in (0.25, 0.5, 0.9):
        assert abs(regularized_beta(x, 1.0, 1.0) - x) < 1e-12


def test_pearson_perfect_and_bounds():
    x = np.arange(10.0)
    r, p = pearson_r_pvalue(x, 2 * x + 1)
    assert r == 1.0 and p == 0.0
    r, p = pearson_r_pvalue(x, -3 * x)
    assert r == -1.0 and p == 0.0
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = rng.random(30), rng.random(30)
        r, p = pearson_r_pvalue(a, b)
        assert -1.0 <= r <= 1.0 and 0.0 <= p <= 1.0


def test_pearson_known_value():
    # r = 0.5 with n = 12 -> t = r sqrt(10/0.75), p from the t distribution
    r = 0.5
    n = 12
    t = r * math.sqrt((n - 2) / (1 - r * r))
    expected = 2 * (0.5 - simpson(lambda x: t_pdf(x, n - 2), 0.0, t))
    # construct data with exactly r = 0.5 via a 2d gaussian trick is fiddly;
    # instead check the p-value helper through student_t_sf directly
    assert abs(2 * student_t_sf(t, n - 2) - expected) < 1e-8


def test_pearson_constant_input_rejected():
    with pytest.raises(DomainError):
        pearson_r(np.ones(5), np.arange(5.0))


def test_pearson_null_distribution():
    # under independence the p-value is roughly uniform: check type-1 rate
    rng = np.random.default_rng(42)
    rejects = 0
    trials = 400
    for _ in range(trials):
        a = rng.normal(size=25)
        b = rng.normal(size=25)
        _, p = pearson_r_pvalue(a, b)
        rejects += p < 0.05
    assert abs(rejects / trials - 0.05) < 0.035
