import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from carnot_lab.fields import DomainError
from carnot_lab.groups import euclidean, heisenberg1
from carnot_lab.heat import (
    EstimationError,
    KernelEnvelope,
    bm_endpoints,
    conv_linf_scaling_check,
    envelope_check,
    euclidean_kernel,
    fit_envelope,
    fit_slope,
    group_convolve,
    kernel_density_estimate,
    kernel_lp_scaling_check,
    semigroup_apply,
)


erf = np.vectorize(math.erf)


def sq(y):
    return y[..., 0] ** 2


@settings(max_examples=25, deadline=None)
@given(x=st.floats(-3, 3), t=st.floats(0.01, 2))
def test_quadrature_exact_on_polynomials(x, t):
    g = euclidean(1)
    est = semigroup_apply(g, sq, t, [x])
    assert est.value == pytest.approx(x * x + 2 * t, rel=1e-12, abs=1e-12)
    est4 = semigroup_apply(g, lambda y: y[..., 0] ** 4, t, [x])
    assert est4.value == pytest.approx(x ** 4 + 12 * x * x * t + 12 * t * t, rel=1e-10, abs=1e-12)


def test_mc_matches_gaussian_within_se():
    g = euclidean(1)
    for k, (x, t) in enumerate([(0.0, 0.5), (1.0, 0.25), (-2.0, 1.0)]):
        est = semigroup_apply(g, sq, t, [x], 100_000, seed=11, method="mc", key=(k,))
        assert abs(est.value - (x * x + 2 * t)) < 4 * est.se


def test_heisenberg_endpoint_moments():
    g = heisenberg1()
    t, n_steps = 0.5, 64
    W = bm_endpoints(g, 2 * t, 100_000, seed=5, n_steps=n_steps)
    h = W[:, :2]
    assert np.mean(np.sum(h ** 2, axis=1)) == pytest.approx(4 * t, rel=0.02)
    # discrete Levy area: Var = (2t)^2 / 4 * (1 - 1/n)
    assert np.var(W[:, 2]) == pytest.approx(t * t * (1 - 1 / n_steps), rel=0.03)
    assert abs(np.mean(W[:, 2])) < 4 * np.std(W[:, 2]) / math.sqrt(len(W))


def test_endpoints_independent_of_thread_count():
    g = heisenberg1()
    a = bm_endpoints(g, 0.3, 5000, seed=7, n_steps=16, threads=1)
    b = bm_endpoints(g, 0.3, 5000, seed=7, n_steps=16, threads=3)
    np.testing.assert_array_equal(a, b)


def test_horizontal_square_on_heisenberg_is_exact_in_mean():
    g = heisenberg1()
    x = np.array([0.3, -0.4, 1.0])
    est = semigroup_apply(g, lambda y: y[..., 0] ** 2 + y[..., 1] ** 2, 0.5, x, 50_000, seed=1, n_steps=32)
    assert abs(est.value - (0.25 + 2 * 0.5 * 2)) < 4 * est.se


def test_non_finite_samples_raise():
    with pytest.raises(EstimationError, match="non-finite"):
        semigroup_apply(euclidean(1), lambda y: np.where(y[..., 0] > 0, np.nan, 0.0), 0.5, [0.0], 1000, method="mc")
    with pytest.raises(DomainError):
        semigroup_apply(euclidean(1), sq, 0.0, [0.0])


def test_kde_against_closed_form():
    g = euclidean(1)
    rng = np.random.default_rng(2)
    xs = rng.uniform(-1.5, 1.5, (10, 1))
    est = kernel_density_estimate(g, 0.5, xs, 100_000, seed=4)
    z = (est.value - euclidean_kernel(0.5, xs)) / est.se
    assert np.max(np.abs(z)) < 3.5
    with pytest.raises(DomainError):
        kernel_density_estimate(g, 0.5, xs, 100, bandwidth=0.0)


def test_envelope_fit_dominates_fitted_points():
    g = euclidean(2)
    rng = np.random.default_rng(3)
    samples = []
    for _ in range(30):
        t = rng.uniform(0.1, 1.0)
        x = rng.normal(size=2) * math.sqrt(t)
        samples.append((t, x, float(euclidean_kernel(t, x)), 0.0))
    env = fit_envelope(g, samples)
    assert env.exponent(g.Q) == -1.0
    rep = envelope_check(g, samples, env=env, slack=0.0)
    assert rep.max_ratio <= 1 + 1e-9
    # the exact kernel is C t^-1 exp(-|x|^2 / 4t) with C = 1 / 4 pi
    assert env.C >= 1 / (4 * math.pi) - 1e-9 or env.c < 0.25
    with pytest.raises(ValueError):
        KernelEnvelope(-1.0, 1.0)


def test_fit_slope_of_power_law():
    ts = np.array([0.1, 0.2, 0.4, 0.8])
    assert fit_slope(ts, 3 * ts ** -1.25) == pytest.approx(-1.25)


def test_lp_scaling_euclidean():
    rep = kernel_lp_scaling_check(euclidean(1), 2.0, (), times=(0.25, 0.5, 1.0, 2.0), mc_samples=200_000,
                                  seed=1, bins=64)
    assert rep.expected == pytest.approx(-0.25)
    assert rep.passed, rep.to_dict()


def test_conv_linf_lower_bound_with_step_function():
    g = euclidean(1)
    rep = conv_linf_scaling_check(g, lambda y: np.sign(y[..., 0]), (1,), math.inf, [[0.0]],
                                  times=(0.01, 0.02, 0.04), mc_samples=200_000, delta=1e-3, method="mc")
    # Z P_t sign at 0 equals 1 / sqrt(pi t): slope -1/2, the bound itself
    assert rep.slope == pytest.approx(-0.5, abs=0.1)
    assert rep.passed
    vac = conv_linf_scaling_check(g, None, (1,), 2.0, [[0.0]])
    assert vac.passed and vac.meta["vacuous"]


def test_group_convolve_euclidean_heat():
    g = euclidean(1)
    z, w = np.polynomial.hermite_e.hermegauss(60)
    t = 0.3
    nodes = (z * math.sqrt(2 * t))[:, None]
    weights = w / w.sum() / euclidean_kernel(t, nodes)

    def f(y):
        return 0.5 * (1 + erf(y[..., 0]))

    out = group_convolve(g, f, lambda y: euclidean_kernel(t, y), [[0.2], [-0.4]], nodes, weights)
    exact = 0.5 * (1 + erf(np.array([0.2, -0.4]) / math.sqrt(1 + 4 * t)))
    np.testing.assert_allclose(out, exact, atol=1e-8)
