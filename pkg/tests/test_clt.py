import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats
from scipy.special import gammaln, kv

from tvcert.clt import (
    CltBase,
    bundi_audit,
    bundi_bound,
    bundi_constants,
    c2_search,
    crossover,
    moment_check,
    rate_fit,
    rho_estimate,
    sn_cf,
    tv_to_gaussian,
)
from tvcert.distkit import dist_from_json
from tvcert.errors import TvcertError

LAP = CltBase.build("laplace")
GAUSS = CltBase.build("gaussian")


def laplace_sn_cf(n, u):
    # standardised Laplace has phi(u) = 1 / (1 + u^2 / 2)
    return (1.0 / (1.0 + u * u / (2.0 * n))) ** n


def tv_oracle_laplace(n):
    """TV distance by quadrature of the exact density of a standardised Laplace sum.

    S_n sqrt n is a sum of n Laplace(sqrt 2) variables, which is a symmetric
    variance-gamma law with density given by a modified Bessel function.
    """
    lam = math.sqrt(2.0)

    def dens(x):
        # sum of n Laplace(lam): f(y) = lam^(n+1/2) |y|^(n-1/2) K_{n-1/2}(lam |y|) / (sqrt(pi) Gamma(n) 2^(n-1/2))
        y = max(abs(x) * math.sqrt(n), 1e-9)
        logc = (n + 0.5) * math.log(lam) - 0.5 * math.log(math.pi) - gammaln(n) - (n - 0.5) * math.log(2)
        return math.sqrt(n) * math.exp(logc + (n - 0.5) * math.log(y)) * kv(n - 0.5, lam * y)

    f = lambda x: abs(dens(x) - stats.norm.pdf(x))  # noqa: E731
    # the toolkit's d_TV is the full L1 distance, with values in [0, 2]
    val, _ = integrate.quad(f, -40, 40, points=[0.0], limit=400)
    return val


# --------------------------------------------------------------- base laws


def test_standardisation_of_shorthands():
    assert LAP.raw.lam == pytest.approx(math.sqrt(2.0))
    assert LAP.cf(np.array([1.0]))[0] == pytest.approx(1 / 1.5)


def test_envelope_of_standardised_laplace():
    assert LAP.envelope.c_phi == pytest.approx(3.0, rel=1e-6)
    assert LAP.alpha == pytest.approx(2.0, rel=1e-6)
    assert LAP.c_sharp == pytest.approx(3.0, rel=1e-6)


def test_nonstandard_base_is_rescaled():
    b = CltBase.build({"family": "laplace", "lambda": 1.0})
    u = np.linspace(-5, 5, 21)
    assert np.max(np.abs(b.cf(u) - LAP.cf(u))) < 1e-14


def test_two_dimensional_base_rejected():
    with pytest.raises(TvcertError) as e:
        CltBase.build({"family": "gaussian", "mean": [0, 0], "cov": [[1, 0], [0, 1]]})
    assert e.value.code == "unsupported_dimension"


# ----------------------------------------------------------- sum CF and TV


def test_sn_cf_example():
    assert sn_cf(LAP, 2, 1.0).real == pytest.approx(0.64, abs=1e-14)


@pytest.mark.parametrize("n", [1, 3, 50, 1000])
def test_sn_cf_against_closed_form(n):
    u = np.linspace(-20, 20, 81)
    assert np.max(np.abs(sn_cf(LAP, n, u) - laplace_sn_cf(n, u))) < 1e-12


def test_gaussian_sum_cf_is_exact():
    u = np.linspace(-6, 6, 25)
    assert np.max(np.abs(sn_cf(GAUSS, 17, u) - np.exp(-u * u / 2))) < 1e-14


@given(st.integers(1, 500), st.floats(-1e4, 1e4))
@settings(max_examples=60, deadline=None)
def test_sn_cf_modulus_at_most_one(n, u):
    assert abs(sn_cf(LAP, n, u)) <= 1 + 1e-15


@pytest.mark.parametrize("n", [1, 2, 7, 64])
def test_gaussian_is_a_fixed_point(n):
    gap = tv_to_gaussian(GAUSS, n)
    assert gap.tv <= 1e-10


@pytest.mark.parametrize("n", [2, 8, 32])
def test_laplace_tv_matches_quadrature_oracle(n):
    gap = tv_to_gaussian(LAP, n)
    assert gap.tv == pytest.approx(tv_oracle_laplace(n), abs=gap.tv_trunc_err + 1e-6)


def test_laplace_tv_decreasing_in_n():
    ns = [2, 4, 8, 16, 32, 64, 128, 256, 512, 1024]
    tvs = [tv_to_gaussian(LAP, n).tv for n in ns]
    assert all(b < a for a, b in zip(tvs, tvs[1:]))


def test_mixture_tv_finite_from_two():
    mix = CltBase.build("laplace_mixture")
    for n in (4, 64):
        gap = tv_to_gaussian(mix, n)
        assert math.isfinite(gap.tv) and 0 < gap.tv < 1


# ---------------------------------------------------------------- rate fit


def test_rate_fit_exact_power():
    ns = [4, 16, 64, 256, 1024]
    fit = rate_fit([(n, 3.0 * n**-0.5) for n in ns])
    assert fit.slope == pytest.approx(-0.5, abs=1e-12)
    assert fit.intercept == pytest.approx(math.log(3.0), abs=1e-12)
    assert fit.band < 1e-10


def test_rate_fit_constant_series():
    fit = rate_fit([(n, 0.2) for n in range(1, 9)])
    assert fit.slope == pytest.approx(0.0, abs=1e-12)


def test_rate_fit_errors():
    with pytest.raises(TvcertError) as e:
        rate_fit([(1, 1.0), (2, 0.5), (3, 0.3)])
    assert e.value.code == "too_few_points"
    with pytest.raises(TvcertError) as e:
        rate_fit([(1, 1.0), (2, 0.0), (3, 0.3), (4, 0.2)])
    assert e.value.code == "log_domain"


# ----------------------------------------------------------------- moments


def test_gaussian_fourth_moment():
    mc = moment_check(GAUSS, 2, [1, 5, 40], paths=40000, seed=1)
    for est, err in zip(mc.estimates, mc.errors):
        assert abs(est - 3.0) <= 4 * err


def test_laplace_fourth_moment_matches_cumulant_formula():
    ns = [1, 4, 32]
    mc = moment_check(LAP, 2, ns, paths=40000, seed=2)
    for n, est, err in zip(ns, mc.estimates, mc.errors):
        # excess kurtosis 3 gives E S_n^4 = 3 + 3 / n
        assert abs(est - (3 + 3 / n)) <= 4 * err
    assert mc.sup == max(mc.estimates)


def test_moment_check_deterministic():
    a = moment_check(LAP, 1, [3], paths=500, seed=4)
    b = moment_check(LAP, 1, [3], paths=500, seed=4)
    assert a.estimates == b.estimates


# ------------------------------------------------------- small-u radius, rho


def test_c2_gaussian_is_one():
    assert c2_search(GAUSS) == 1.0


def test_c2_laplace_against_grid_oracle():
    x = np.linspace(1e-4, 1.0, 10000)
    ok = (1 / (1 + x * x / 2) <= 1 - x * x / 3 + 4e-16) & (1 - x * x / 3 <= np.exp(-x * x / 4))
    expected = x[-1] if ok.all() else x[np.argmin(ok) - 1]
    assert c2_search(LAP) == pytest.approx(expected, abs=2e-4)
    assert c2_search(LAP) <= 1.0


@pytest.mark.parametrize(
    "spec,c,expected",
    [
        ({"family": "laplace", "lambda": 1.0}, 1.0, 0.5),
        ({"family": "laplace", "lambda": 1.0}, 2.0, 0.2),
        ({"family": "gaussian", "mean": [0.0], "cov": [[1.0]]}, 1.0, math.exp(-0.5)),
    ],
)
def test_rho_examples(spec, c, expected):
    cf = dist_from_json(spec).charfn()
    assert rho_estimate(cf, c) == pytest.approx(expected, abs=1e-9)


def test_rho_lattice_detected():
    coin = dist_from_json({"family": "discrete", "points": [[-1], [1]], "weights": [0.5, 0.5]}).charfn()
    with pytest.raises(TvcertError) as e:
        rho_estimate(coin, 1.0)
    assert e.value.code == "lattice_suspected"


# ------------------------------------------------------- piecewise CF bound


def test_bundi_constants_laplace():
    k = bundi_constants(LAP, 1)
    assert k.rho == pytest.approx(2 / 3, abs=1e-9)
    assert k.J == pytest.approx(k.c_sharp ** (2 / k.alpha))
    assert k.N_hat == pytest.approx(1.0, rel=1e-6)
    assert k.H_l == pytest.approx(math.e**3)


@pytest.mark.parametrize("l", [1, 2, 3])
def test_crossover_is_first_index(l):
    k = bundi_constants(LAP, l)
    N = crossover(k.rho, k.J, l)
    h = lambda n: k.rho**n <= (1 + k.J * n) ** -l  # noqa: E731
    assert h(N) and (N == 1 or not h(N - 1))
    assert all(h(n) for n in range(N, N + 200))


def test_bundi_value_at_zero():
    k = bundi_constants(LAP, 1)
    val, label = bundi_bound(LAP, 1, k.N, 0.0, constants=k)
    assert label == "small"
    assert val == pytest.approx(math.e**3)


def test_bundi_labels_cover_three_regions():
    k = bundi_constants(LAP, 2)
    n = k.N
    u = np.array([0.0, 0.5 * (k.c2 * math.sqrt(n) + k.J * n), 2 * k.J * n])
    _, labels = bundi_bound(LAP, 2, n, u, constants=k)
    assert list(labels) == ["small", "moderate", "large"]


def test_bundi_below_crossover():
    k = bundi_constants(LAP, 3)
    with pytest.raises(TvcertError) as e:
        bundi_bound(LAP, 3, k.N - 1, 0.0, constants=k)
    assert e.value.code == "below_crossover"
    assert e.value.details["required"] == k.N


def test_bundi_audit_no_violations():
    k = bundi_constants(LAP, 2)
    violations, checked, _ = bundi_audit(LAP, 2, [k.N, 2 * k.N, 10 * k.N], u_per_case=500)
    assert checked == 3 * 6 * 500
    assert violations == 0
