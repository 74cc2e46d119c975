import math

import numpy as np
import pytest

from carnot_lab.drift import smooth_drift, zero_drift
from carnot_lab.fields import GridField, bump, make_grid
from carnot_lab.groups import euclidean, heisenberg1
from carnot_lab.heat import fit_slope
from carnot_lab.kolmogorov import (
    LambdaSelectionError,
    StabilityError,
    apriori_heat_check,
    grad_sup,
    select_lambda,
    solve_heat,
    solve_kolmogorov,
)


def _center(field):
    idx = tuple(n // 2 for n in field.grid.n_x)
    return field.values[(slice(None),) + idx]


def _const(grid, fn):
    return GridField.from_function(grid, lambda t, x: np.full(x.shape[:-1], fn(t)))


@pytest.mark.parametrize("scheme", ["euler", "heun"])
def test_constant_forcing_gives_linear_growth(scheme):
    g = euclidean(1)
    grid = make_grid(g, 0.1, 1.0, 0.1, bounds=[3.0])
    sol = solve_heat(g, _const(grid, lambda t: 1.0), residual=False, scheme=scheme)
    np.testing.assert_allclose(_center(sol.u), grid.times, atol=1e-12)


def test_time_only_forcing_to_stepping_error():
    g = heisenberg1()
    grid = make_grid(g, 0.2, 1.0, 0.2, bounds=[1.6, 1.6, 1.6])
    sol = solve_heat(g, _const(grid, np.cos), residual=False)
    err = np.max(np.abs(_center(sol.u) - np.sin(grid.times)))
    assert err < grid.dt


def test_backward_equation_x_independent():
    g = heisenberg1()
    grid = make_grid(g, 0.2, 1.0, 0.2, bounds=[1.6, 1.6, 1.6], kappa=0.5)
    lam = 3.0
    sol = solve_kolmogorov(g, zero_drift(g), _const(grid, lambda t: -1.0), lam, residual=False,
                           scheme="heun")
    exact = (1 - np.exp(-lam * (grid.T - grid.times))) / lam
    np.testing.assert_allclose(_center(sol.u), exact, atol=grid.dt ** 2)


def test_refinement_slope_euclidean():
    g = euclidean(1)

    def exact(t, x):
        return t * np.exp(-x[..., 0] ** 2)

    def forcing(t, x):
        y = x[..., 0]
        return np.exp(-y ** 2) - t * (4 * y ** 2 - 2) * np.exp(-y ** 2)

    hs = [0.2, 0.1, 0.05]
    errs, ratios = [], []
    for h in hs:
        grid = make_grid(g, 0.5, 1.0, h, bounds=[6.0])
        f = GridField.from_function(grid, forcing)
        sol = solve_heat(g, f, residual=False)
        errs.append(np.max(np.abs(sol.u.values - GridField.from_function(grid, exact).values)))
        ratios.append(apriori_heat_check(sol, f, 0, 2, 2)["ratio"])
    assert fit_slope(hs, errs) >= 1.8
    assert max(ratios) / min(ratios) < 1.2


def test_stability_guard():
    g = euclidean(1)
    grid = make_grid(g, 1.0, 1.0, 0.05, bounds=[1.0], n_t=4)
    with pytest.raises(StabilityError):
        solve_heat(g, _const(grid, lambda t: 1.0))


@pytest.fixture(scope="module")
def smooth_setup():
    g = heisenberg1()
    b = smooth_drift(g, [1.0, 0.5], amplitude=0.8, radius=1.0, plateau=0.0)
    grid = make_grid(g, 0.2, 1.0, 0.125, bounds=[1.5, 1.5, 1.5], kappa=0.5)
    f = GridField.from_function(grid, lambda t, x: -b.euclidean(t, x))
    return g, b, f


def test_picard_matches_march(smooth_setup):
    g, b, f = smooth_setup
    pic = solve_kolmogorov(g, b, f, 4.0, method="picard", residual=False)
    mar = solve_kolmogorov(g, b, f, 4.0, method="march", residual=False)
    assert pic.iterations > 1
    scale = np.max(np.abs(mar.u.values))
    assert np.max(np.abs(pic.u.values - mar.u.values)) < 0.05 * scale


def test_plugin_residual_small_for_smooth_drift(smooth_setup):
    g, b, f = smooth_setup
    grid = make_grid(g, 0.2, 1.0, 0.125, bounds=[1.5, 1.5, 1.5], kappa=0.5, order=4)
    f = GridField.from_function(grid, lambda t, x: -b.euclidean(t, x))
    sol = solve_kolmogorov(g, b, f, 4.0, method="march", scheme="heun", order=4)
    assert sol.residual_norm < 1e-2
    assert not math.isnan(sol.grad_sup)


def test_gradient_decreases_with_lambda(smooth_setup):
    g, b, f = smooth_setup
    sups = [solve_kolmogorov(g, b, f, lam, method="march", residual=False).grad_sup for lam in (1, 4, 16, 64)]
    assert all(a > c for a, c in zip(sups, sups[1:]))


def test_select_lambda_history_and_failure(smooth_setup):
    g, b, f = smooth_setup
    lam, sol = select_lambda(g, b, f, 0.5, method="march", residual=False)
    hist = sol.diagnostics["lambda_history"]
    assert hist[-1]["lambda"] == lam and sol.grad_sup <= 0.5
    assert all(h["max_sup"] > 0.5 or h["grad_sup"] > 0.5 for h in hist[:-1])
    with pytest.raises(LambdaSelectionError):
        select_lambda(g, b, f, 1e-6, lam_max=4, method="march", residual=False)


def test_zero_forcing_gives_zero():
    g = heisenberg1()
    grid = make_grid(g, 0.1, 1.0, 0.25, bounds=[1.0, 1.0, 1.0], kappa=0.5)
    b = smooth_drift(g, [1, 0])
    sol = solve_kolmogorov(g, b, GridField.zeros(grid, 3), 1.0)
    assert np.all(sol.u.values == 0) and grad_sup(sol.u) == 0


def test_heat_residual_on_h1_bump():
    g = heisenberg1()
    grid = make_grid(g, 0.1, 1.0, 0.1, bounds=[1.5, 1.5, 1.5], order=4)
    f = GridField.from_function(grid, lambda t, x: bump(np.linalg.norm(x, axis=-1)))
    sol = solve_heat(g, f, scheme="heun", order=4)
    assert sol.residual_norm < 1e-3
