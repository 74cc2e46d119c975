import math

import numpy as np
import pytest

from carnot_lab.embedding import embedding_exponent, embedding_scaling_test, heat_family
from carnot_lab.fields import DomainError, GridField, make_grid
from carnot_lab.groups import euclidean


def test_exponent_values():
    inf = math.inf
    assert embedding_exponent(4, 0, 0, 9, 9, inf, inf) == pytest.approx((2 - 6 / 9) / 2)
    assert embedding_exponent(1, 0, 0, 9, 9, inf, inf) == pytest.approx((2 - 3 / 9) / 2)
    assert embedding_exponent(4, 1, 2, 9, 9, 9, 9) == pytest.approx(0.5)
    assert embedding_exponent(3, 0, 1, 2, 2, 2, 2) == pytest.approx(0.5)


@pytest.mark.parametrize("args", [
    (4, 0, 2, 9, 9, 9, 9),          # l not in {k, k+1}
    (4, 0, 0, 9, 9, 5, 9),          # q1 < q
    (4, 0, 1, 2, 2, math.inf, math.inf),  # 2/q + Q/p too large
])
def test_exponent_domain_errors(args):
    with pytest.raises(DomainError):
        embedding_exponent(*args)


def test_zero_family_is_vacuous():
    g = euclidean(1)
    fam = [GridField.zeros(make_grid(g, T, 1.0, 0.1, bounds=[2.0])) for T in (0.25, 0.5, 1.0)]
    rep = embedding_scaling_test(fam, 0, 0, 9, 9, math.inf, math.inf)
    assert rep["slope"] == -math.inf and rep["passed"]


def test_nonzero_initial_value_rejected():
    g = euclidean(1)
    grid = make_grid(g, 1.0, 1.0, 0.1, bounds=[2.0])
    u = GridField.from_function(grid, lambda t, x: np.ones(x.shape[:-1]))
    with pytest.raises(DomainError):
        embedding_scaling_test([u], 0, 0, 9, 9, math.inf, math.inf)


def test_heat_family_slope_euclidean():
    g = euclidean(1)
    fam = heat_family(g, (0.0625, 0.125, 0.25), 1.0, 0.05, bounds=[3.0], bump_radius=0.25)
    rep = embedding_scaling_test(fam, 0, 0, 9, 9, math.inf, math.inf)
    assert rep["passed"], rep
    assert all(r > 0 for r in rep["ratios"])
