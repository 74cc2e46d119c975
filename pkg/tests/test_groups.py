import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.linalg import expm, logm

from carnot_lab.groups import (
    GroupSpecError,
    builtin_group,
    commutator_field,
    dilate,
    engel,
    euclidean,
    field_jacobian,
    group_law,
    heisenberg1,
    homogeneous_norm,
    horizontal_field_matrix,
    inverse,
    load_group,
    nested_bracket_field,
)

GROUPS = [euclidean(1), euclidean(2), euclidean(3), heisenberg1(), engel()]
IDS = [g.name for g in GROUPS]


def E(n, i, j):
    a = np.zeros((n, n))
    a[i - 1, j - 1] = 1.0
    return a


# Faithful nilpotent matrix representations used as an independent oracle.
H1_BASIS = [E(3, 1, 2), E(3, 2, 3), E(3, 1, 3)]
ENGEL_BASIS = [E(4, 2, 3) + E(4, 3, 4), E(4, 1, 2), -E(4, 1, 3), E(4, 1, 4)]


def matrix_law(basis, x, y):
    X = sum(a * b for a, b in zip(x, basis))
    Y = sum(a * b for a, b in zip(y, basis))
    Z = np.real(logm(expm(X) @ expm(Y)))
    B = np.stack([b.ravel() for b in basis], axis=1)
    return np.linalg.lstsq(B, Z.ravel(), rcond=None)[0]


def points(N):
    return arrays(np.float64, (N,), elements=st.floats(-2, 2, allow_nan=False))


def test_heisenberg_product_of_generators():
    g = heisenberg1()
    np.testing.assert_allclose(group_law(g, [1, 0, 0], [0, 1, 0]), [1, 1, 0.5], atol=1e-14)
    np.testing.assert_allclose(matrix_law(H1_BASIS, [1, 0, 0], [0, 1, 0]), [1, 1, 0.5], atol=1e-12)


@pytest.mark.parametrize("g,basis", [(heisenberg1(), H1_BASIS), (engel(), ENGEL_BASIS)], ids=["h1", "engel"])
def test_group_law_matches_matrix_representation(g, basis):
    rng = np.random.default_rng(0)
    for _ in range(25):
        x, y = rng.uniform(-1.5, 1.5, (2, g.N))
        np.testing.assert_allclose(group_law(g, x, y), matrix_law(basis, x, y), atol=1e-9)


@pytest.mark.parametrize("g", GROUPS, ids=IDS)
@settings(max_examples=60, deadline=None)
@given(data=st.data())
def test_axioms(g, data):
    x, y, z = (data.draw(points(g.N)) for _ in range(3))
    np.testing.assert_allclose(group_law(g, group_law(g, x, y), z), group_law(g, x, group_law(g, y, z)),
                               atol=1e-10)
    np.testing.assert_allclose(group_law(g, x, np.zeros(g.N)), x, atol=1e-14)
    np.testing.assert_allclose(group_law(g, x, inverse(g, x)), 0, atol=1e-12)
    np.testing.assert_allclose(group_law(g, inverse(g, x), x), 0, atol=1e-12)


@pytest.mark.parametrize("g", GROUPS, ids=IDS)
@settings(max_examples=40, deadline=None)
@given(data=st.data(), lam=st.floats(0.1, 5))
def test_dilation_is_automorphism_and_norm_homogeneous(g, data, lam):
    x, y = data.draw(points(g.N)), data.draw(points(g.N))
    lhs = dilate(g, lam, group_law(g, x, y))
    rhs = group_law(g, dilate(g, lam, x), dilate(g, lam, y))
    np.testing.assert_allclose(lhs, rhs, atol=1e-9 * max(1.0, lam ** g.r))
    assert homogeneous_norm(g, dilate(g, lam, x)) == pytest.approx(lam * homogeneous_norm(g, x), rel=1e-10,
                                                                   abs=1e-12)
    assert homogeneous_norm(g, inverse(g, x)) == pytest.approx(homogeneous_norm(g, x), rel=1e-12, abs=1e-14)


def _fd_jacobian(fn, x, h=1e-5):
    N = len(x)
    J = np.empty((N, N))
    for k in range(N):
        e = np.zeros(N)
        e[k] = h
        J[:, k] = (fn(x + e) - fn(x - e)) / (2 * h)
    return J


@pytest.mark.parametrize("g", GROUPS, ids=IDS)
def test_translations_preserve_lebesgue_measure(g):
    rng = np.random.default_rng(1)
    for _ in range(10):
        a, x = rng.uniform(-1, 1, (2, g.N))
        assert np.linalg.det(_fd_jacobian(lambda y: group_law(g, a, y), x)) == pytest.approx(1, abs=1e-8)
        assert np.linalg.det(_fd_jacobian(lambda y: group_law(g, y, a), x)) == pytest.approx(1, abs=1e-8)


@pytest.mark.parametrize("g", GROUPS, ids=IDS)
def test_brackets_beyond_step_vanish(g):
    rng = np.random.default_rng(2)
    x = rng.uniform(-1, 1, g.N)
    for word in [(1,) * (g.r + 1), (1, 2, 1, 2)[: g.r + 1] if g.m > 1 else (1,) * (g.r + 1)]:
        np.testing.assert_allclose(nested_bracket_field(g, word, x), 0, atol=1e-14)


def test_heisenberg_fields_closed_form():
    g = heisenberg1()
    x = np.array([0.7, -1.3, 0.2])
    Z = horizontal_field_matrix(g, x)
    np.testing.assert_allclose(Z[:, 0], [1, 0, 1.3 / 2], atol=1e-15)
    np.testing.assert_allclose(Z[:, 1], [0, 1, 0.7 / 2], atol=1e-15)


def _flow_commutator(g, i, j, x):
    """(x o s e_i o s e_j o -s e_i o -s e_j - x) / s^2 extrapolated to s = 0.

    The map is polynomial in s, so a polynomial fit through eight step sizes
    recovers the limit to rounding error.
    """
    ss = 0.2 * 2.0 ** -np.arange(8)
    vals = []
    for s in ss:
        p = np.array(x, dtype=float)
        for k, sign in ((i, 1), (j, 1), (i, -1), (j, -1)):
            e = np.zeros(g.N)
            e[k - 1] = sign * s
            p = group_law(g, p, e)
        vals.append((p - x) / s ** 2)
    return np.polyfit(ss, np.array(vals), 7)[-1]


def test_heisenberg_commutator_is_vertical():
    g = heisenberg1()
    for x in np.random.default_rng(3).uniform(-1, 1, (5, 3)):
        np.testing.assert_allclose(commutator_field(g, 1, 2, x), [0, 0, 1], atol=1e-14)
        np.testing.assert_allclose(_flow_commutator(g, 1, 2, x), [0, 0, 1], atol=1e-6)


def test_engel_weight_three_direction():
    g = engel()
    for x in np.random.default_rng(4).uniform(-1, 1, (5, 4)):
        Z12 = commutator_field(g, 1, 2, x)
        np.testing.assert_allclose(Z12, _flow_commutator(g, 1, 2, x), atol=1e-6)
        Z112 = nested_bracket_field(g, (1, 1, 2), x)
        np.testing.assert_allclose(Z112, [0, 0, 0, 1], atol=1e-14)


@pytest.mark.parametrize("g", [heisenberg1(), engel()], ids=["h1", "engel"])
def test_field_bracket_matches_fd_jacobians(g):
    rng = np.random.default_rng(5)
    for x in rng.uniform(-1, 1, (5, g.N)):
        Z = horizontal_field_matrix(g, x)
        J1 = _fd_jacobian(lambda y: horizontal_field_matrix(g, y)[:, 0], x)
        J2 = _fd_jacobian(lambda y: horizontal_field_matrix(g, y)[:, 1], x)
        np.testing.assert_allclose(J2 @ Z[:, 0] - J1 @ Z[:, 1], commutator_field(g, 1, 2, x), atol=1e-6)
        np.testing.assert_allclose(field_jacobian(g, x, 0), J1, atol=1e-7)


def test_load_group_from_json(tmp_path):
    p = tmp_path / "h.json"
    p.write_text(json.dumps(heisenberg1().to_json_dict()))
    g = load_group(p)
    np.testing.assert_array_equal(g.structure_constants, heisenberg1().structure_constants)
    assert (g.N, g.m, g.r, g.Q) == (3, 2, 2, 4)


def test_engel_invariants():
    g = engel()
    assert (g.N, g.m, g.r, g.Q, g.layer_dims) == (4, 2, 3, 7, (2, 1, 1))


@pytest.mark.parametrize("spec,msg", [
    ({"weights": [1, 1, 2, 3], "brackets": [{"i": 1, "j": 2, "k": 4, "c": 1}]}, "grading"),
    ({"weights": [1, 1, 2], "brackets": []}, "layer 2"),
    ({"weights": [1, 2], "brackets": []}, "layer 2"),
    ({"weights": [1, 1, 2], "brackets": [{"i": 1, "j": 5, "k": 3, "c": 1}]}, "out of range"),
    ({"weights": [1, 1, 2], "N": 4, "brackets": [{"i": 1, "j": 2, "k": 3, "c": 1}]}, "declared N"),
])
def test_malformed_specs_rejected(spec, msg):
    with pytest.raises(GroupSpecError, match=msg):
        load_group(spec)


def test_missing_file_and_unknown_name():
    with pytest.raises(FileNotFoundError, match="nope.json"):
        load_group("/nonexistent/nope.json")
    with pytest.raises(GroupSpecError):
        builtin_group("sl2")


def test_batch_shape_errors():
    with pytest.raises(ValueError):
        group_law(heisenberg1(), np.zeros(2), np.zeros(3))
