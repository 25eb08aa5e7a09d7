import math

import numpy as np
import pytest

from tvcert.distkit import TailEnvelope, empirical_cf
from tvcert.dynsys import (
    backward_coupling,
    certified_tv_rate,
    empirical_tv_decay,
    load_recursion,
    register_map,
    simulate_recursion,
    w1_geometric_bound,
)
from tvcert.errors import ConfigError, TvcertError
from tvcert.metrics import w1_1d

GAUSS = {"family": "gaussian", "mean": [0.0], "cov": [[1.0]]}
LAP = {"family": "laplace", "lambda": 1.0}


def example(innovation=GAUSS, kappa=0.5, init=None, **extra):
    spec = {
        "nu": {"type": "affine", "A": [[kappa]], "b": [0.0]},
        "coeffs": {"type": "geometric", "ratio": 0.5, "tol": 1e-8},
        "innovation": innovation,
        "init": init or {"family": "point", "x": [0.0]},
        "kappa": kappa,
    }
    spec.update(extra)
    return spec


def variance_oracle(n, kappa=0.5, ratio=0.5, J=27):
    """Var X_n for X_0 = 0, X_{k+1} = kappa X_k + xi_{k+1} with xi = sum_j ratio^j eps_{k-j}.

    X_n = sum_{m=1}^n kappa^{n-m} xi_m, so Var X_n = sum_{m,m'} kappa^{2n-m-m'} Cov(xi_m, xi_m')
    with Cov(xi_m, xi_{m-h}) = sum_{j<=J-h} ratio^j ratio^{j+h}.
    """
    b = ratio ** np.arange(J + 1)
    acov = np.array([np.dot(b[: J + 1 - h], b[h:]) if h <= J else 0.0 for h in range(n + 1)])
    total = 0.0
    for m in range(1, n + 1):
        for mp in range(1, n + 1):
            total += kappa ** (2 * n - m - mp) * acov[abs(m - mp)]
    return total


# ------------------------------------------------------------------ spec


def test_truncation_index_for_geometric_coefficients():
    spec = load_recursion(example())
    # sum_{j > J} 2^-j = 2^-J <= 1e-8 first holds at J = 27
    assert spec.J == 27
    assert 2.0**-27 <= 1e-8 < 2.0**-26


def test_zero_leading_coefficient_rejected():
    bad = example(coeffs={"type": "explicit", "values": [0.0, 0.0, 0.0]})
    with pytest.raises(TvcertError) as e:
        load_recursion(bad)
    assert e.value.code == "invalid_coefficients"


@pytest.mark.parametrize("kappa", [0.0, 1.0, 1.5])
def test_kappa_outside_unit_interval_rejected(kappa):
    with pytest.raises(ConfigError) as e:
        load_recursion(example(kappa=0.5) | {"kappa": kappa})
    assert e.value.field == "kappa"


def test_declared_kappa_audited():
    register_map("too_steep", lambda x: 0.9 * x, 0.3)
    bad = example() | {"nu": {"type": "registered", "name": "too_steep"}, "kappa": 0.3}
    with pytest.raises(TvcertError) as e:
        load_recursion(bad)
    assert e.value.code == "contraction_violated"


def test_map_constant_above_declared_kappa():
    with pytest.raises(TvcertError) as e:
        load_recursion(example() | {"nu": {"type": "affine", "A": [[0.8]], "b": [0.0]}})
    assert e.value.code == "contraction_violated"


def test_scaled_tanh_map_passes_audit():
    spec = load_recursion(example() | {"nu": {"type": "scaled_tanh", "kappa": 0.4}})
    assert spec.nu.kappa == 0.4


# ------------------------------------------------------------- simulation


def test_collapsed_recursion_reproduces_innovation_cf():
    spec = example(innovation=LAP) | {
        "nu": {"type": "affine", "A": [[0.0]], "b": [0.0]},
        "coeffs": {"type": "explicit", "values": [1.0]},
    }
    P = 40000
    X = simulate_recursion(spec, 3, P, seed=1)
    u = np.array([0.5, 1.0, 2.0])
    for n in (1, 2, 3):
        assert np.max(np.abs(empirical_cf(X[n], u) - 1 / (1 + u * u))) < 5 / math.sqrt(P)


def test_simulation_deterministic():
    a = simulate_recursion(example(), 5, 100, seed=9)
    b = simulate_recursion(example(), 5, 100, seed=9)
    assert np.array_equal(a, b)


def test_variance_matches_second_moment_oracle():
    P = 40000
    oracle = variance_oracle(50)
    for seed in (0, 1):
        X = simulate_recursion(example(), 50, P, seed=seed)
        v = float(np.var(X[50], ddof=1))
        # Gaussian X_n: the sample variance has standard error var * sqrt(2 / (P - 1))
        assert abs(v - oracle) <= 3 * oracle * math.sqrt(2 / (P - 1))


def test_noise_is_stationary():
    spec = example(init={"family": "point", "x": [0.0]}) | {"nu": {"type": "affine", "A": [[0.0]], "b": [0.0]}}
    P = 40000
    X = simulate_recursion(spec, 6, P, seed=3)  # with nu = 0, X_n = xi_n
    var_xi = 4 / 3  # sum_j 4^-j
    for n in range(1, 7):
        assert abs(X[n].mean()) < 3 * math.sqrt(var_xi / P)
        assert abs(X[n].var(ddof=1) - var_xi) < 3 * var_xi * math.sqrt(2 / (P - 1))


def test_divergence_detected_with_path():
    spec = example(innovation={"family": "cauchy", "loc": 0.0, "scale": 1e306})
    with pytest.raises(TvcertError) as e:
        simulate_recursion(spec, 50, 200, seed=0)
    assert e.value.code == "divergence_detected"
    assert "path" in e.value.details


def test_doubling_truncation_changes_paths_within_bound():
    loose = example(coeffs={"type": "geometric", "ratio": 0.5, "tol": 1e-3})
    fine = example(coeffs={"type": "geometric", "ratio": 0.5, "tol": 1e-6})
    a, b = load_recursion(loose), load_recursion(fine)
    assert b.J >= 2 * a.J
    Xa = simulate_recursion(a, 10, 5000, seed=4)
    Xb = simulate_recursion(b, 10, 5000, seed=4)
    # shared innovations: the difference comes only from the dropped tail of the series
    bound = a.coeff_tail * math.sqrt(2 / math.pi) / (1 - a.kappa)
    diff = np.abs(Xa[10] - Xb[10])
    assert diff.mean() <= bound + 3 * diff.std(ddof=1) / math.sqrt(diff.size)


# --------------------------------------------------------------- coupling


def test_coupling_equal_start_is_zero():
    c = backward_coupling(example(), 6, 6, 1000, seed=0)
    assert c.gap_mean == 0.0


def test_coupling_gap_below_proof_bound():
    spec = example(innovation=LAP, init={"family": "point", "x": [1.0]})
    w1 = w1_geometric_bound(spec)
    for n in (1, 3, 6, 9, 12):
        c = backward_coupling(spec, n, 4 * n, 20000, seed=1)
        assert c.gap_mean <= w1(n) + 3 * c.gap_se


def test_coupling_contracts_each_step():
    spec = example(innovation=LAP, init={"family": "point", "x": [1.0]})
    c = backward_coupling(spec, 10, 30, 20000, seed=2)
    path = np.array(c.gap_path)
    # with an affine map the one-step inequality holds pathwise, hence for the means
    assert np.all(path[1:] <= 0.5 * path[:-1] + 1e-12)


def test_coupling_gap_decay_slope():
    spec = example(innovation=LAP, init={"family": "point", "x": [1.0]})
    ns = np.arange(1, 11)
    gaps = [backward_coupling(spec, int(n), 40, 20000, seed=3).gap_mean for n in ns]
    slope = np.polyfit(ns, np.log(gaps), 1)[0]
    assert abs(slope - math.log(0.5)) <= 0.1


# --------------------------------------------------------------- W1 bound


def test_w1_bound_example_arithmetic():
    w1 = w1_geometric_bound(example())
    S = 2 * math.sqrt(2 / math.pi) / 0.5
    assert w1.details["S"] == pytest.approx(S, rel=1e-12)
    assert w1.C == pytest.approx(6.383, abs=1e-3)
    assert w1(5) == pytest.approx(0.1995, abs=1e-4)
    assert w1.rho == 0.5


def test_w1_bound_tiny_kappa():
    spec = example(kappa=1e-6)
    w1 = w1_geometric_bound(spec)
    S = w1.details["S"]
    assert w1(2) == pytest.approx(2 * S * 1e-12, rel=1e-12)


def test_w1_bound_moment_diverges():
    with pytest.raises(TvcertError) as e:
        w1_geometric_bound(example(innovation={"family": "cauchy"}))
    assert e.value.code == "moment_diverges"


def test_w1_bound_dominates_simulated_w1():
    spec = example()
    w1 = w1_geometric_bound(spec)
    X = simulate_recursion(spec, 20, 20000, seed=5)
    for n in range(2, 11):
        emp = w1_1d(X[n], X[20])
        # sample W1 has an O(1/sqrt(P)) bias of its own; 3 / sqrt(P) covers it at this size
        assert emp <= w1(n) + 3 / math.sqrt(20000) * math.sqrt(float(X[20].var()))


# ---------------------------------------------------------------- TV rate


def test_certified_rate_exponent_and_ratio():
    rate = certified_tv_rate(example(innovation=LAP), innovation_envelope=TailEnvelope(2.0, 1.0, 1, 1e3, True))
    assert rate.details["g"] == pytest.approx(1 / 6)
    assert rate.rho == pytest.approx(0.5 ** (1 / 6))
    assert rate.rho == pytest.approx(0.8909, abs=1e-4)


def test_pooled_envelope_constant():
    rate = certified_tv_rate(example(innovation=LAP), innovation_envelope=TailEnvelope(2.0, 1.0, 1, 1e3, True))
    assert rate.details["c_phi"] == pytest.approx(8.0)


def test_certified_curve_is_capped_at_two():
    rate = certified_tv_rate(example(innovation=LAP))
    assert rate(1) == 2.0
    assert rate(200) < 2.0


def test_uncertified_innovation_envelope():
    with pytest.raises(TvcertError) as e:
        certified_tv_rate(example(innovation=LAP), innovation_envelope=TailEnvelope(2.0, 1.0, 1, 1e3, False))
    assert e.value.code == "uncertified_envelope"


# ----------------------------------------------------------- empirical TV


def test_empirical_tv_at_reference_is_zero():
    s = empirical_tv_decay(example(innovation=LAP), 4, reference_horizon=4, paths=2000, ns=[4])
    assert s.tv == [0.0]


def test_empirical_tv_eventually_decreasing_and_below_certified_curve():
    spec = example(innovation=LAP, init={"family": "point", "x": [1.0]})
    s = empirical_tv_decay(spec, 8, paths=8000, seed=1)
    rate = certified_tv_rate(spec)
    tv, err = np.array(s.tv), np.array(s.tv_err)
    for i in range(2, len(tv)):
        assert tv[i] <= tv[i - 1] + 3 * (err[i] + err[i - 1])
    assert np.all(tv <= rate(np.array(s.n)) + 3 * err)


def test_bandwidth_sensitivity_within_smoothing_bound():
    spec = example(init={"family": "point", "x": [1.0]})
    a = empirical_tv_decay(spec, 4, paths=8000, seed=2, h=0.2, ns=[2, 4])
    b = empirical_tv_decay(spec, 4, paths=8000, seed=2, h=0.1, ns=[2, 4])
    for x, y in zip(a.tv, b.tv):
        assert abs(x - y) < a.smoothing_bound
