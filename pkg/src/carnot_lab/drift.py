"""Horizontal drifts b = sum_i b^i Z_i and their admissibility.

Drifts are built from a small expression family: zero, smooth cut-off
plateaus, polynomials, regularised homogeneous singularities and grid data.
Every analytic component is multiplied by a smooth cutoff that vanishes
outside the homogeneous ball of radius ``support_radius`` around ``center``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fields import GridField, SpaceTimeGrid, apply_word, horizontal_words, make_grid, mixed_norm
from .groups import CarnotGroupSpec, group_law, horizontal_field_matrix, homogeneous_norm, inverse

__all__ = [
    "DriftSpec",
    "AdmissibilityReport",
    "pq_value",
    "cutoff",
    "zero_drift",
    "smooth_drift",
    "singular_drift",
    "polynomial_drift",
    "grid_drift",
    "euclidean_drift",
    "horizontal_residual",
    "check_admissibility",
]


def _h(u):
    out = np.zeros_like(u)
    pos = u > 0
    out[pos] = np.exp(-1.0 / u[pos])
    return out


def cutoff(s, plateau: float = 0.5):
    """Smooth function equal to 1 for s <= plateau and 0 for s >= 1."""
    s = np.asarray(s, dtype=float)
    a = _h(1.0 - s)
    b = _h(s - plateau)
    return a / (a + b)


@dataclass(frozen=True, eq=False)
class DriftSpec:
    """Horizontal drift with integrability exponents (p, q).

    ``components`` holds m callables ``b_i(t, x)`` (or scalar GridFields).
    """

    group: CarnotGroupSpec
    components: tuple
    p: float
    q: float
    support_radius: float
    name: str = "drift"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        comps = tuple(self.components)
        if len(comps) != self.group.m:
            raise ValueError(f"drift needs {self.group.m} horizontal components, got {len(comps)}")
        object.__setattr__(self, "components", comps)

    @property
    def is_zero(self) -> bool:
        return self.meta.get("kind") == "zero"

    def coeffs(self, t, x) -> np.ndarray:
        """Horizontal coefficients b^i(t, x); shape (..., m)."""
        x = np.asarray(x, dtype=float)
        if self.is_zero:
            return np.zeros(x.shape[:-1] + (self.group.m,))
        return np.stack([np.broadcast_to(c(t, x), x.shape[:-1]) for c in self.components], axis=-1)

    def euclidean(self, t, x) -> np.ndarray:
        """The drift as a Euclidean vector sum_i b^i Z_i(x); shape (..., N)."""
        x = np.asarray(x, dtype=float)
        return np.einsum("...ni,...i->...n", horizontal_field_matrix(self.group, x), self.coeffs(t, x))

    def sample(self, grid: SpaceTimeGrid, euclidean: bool = False) -> GridField:
        fn = self.euclidean if euclidean else self.coeffs
        return GridField.from_function(grid, fn)

    def default_grid(self, h: float | None = None, T: float = 1.0, n_t: int = 1) -> SpaceTimeGrid:
        center = np.asarray(self.meta.get("center", np.zeros(self.group.N)), dtype=float)
        R = self.support_radius
        h = h or R / 12
        bounds = [abs(c) + R ** a + 3 * h for c, a in zip(center, self.group.weights)]
        return make_grid(self.group, T, R, h, bounds=bounds, n_t=n_t)


def pq_value(g: CarnotGroupSpec, p: float, q: float) -> float:
    return 2.0 / q + g.Q / p


def _localize(g, center, radius, plateau):
    center = np.asarray(center if center is not None else np.zeros(g.N), dtype=float)

    def chi(x):
        rel = group_law(g, inverse(g, center), x)
        return cutoff(homogeneous_norm(g, rel) / radius, plateau), rel

    return center, chi


def zero_drift(g: CarnotGroupSpec, p: float = math.inf, q: float = math.inf) -> DriftSpec:
    zero = [lambda t, x: np.zeros(np.shape(x)[:-1])] * g.m
    return DriftSpec(g, tuple(zero), p, q, 1.0, "zero", {"kind": "zero"})


def smooth_drift(g: CarnotGroupSpec, direction, amplitude: float = 1.0, radius: float = 1.0,
                 p: float = 9.0, q: float = 9.0, center=None, plateau: float = 0.5) -> DriftSpec:
    """b^i = amplitude * direction_i * cutoff(||center^-1 o x|| / radius)."""
    direction = np.asarray(direction, dtype=float)
    center, chi = _localize(g, center, radius, plateau)

    def comp(i):
        return lambda t, x: amplitude * direction[i] * chi(np.asarray(x, dtype=float))[0]

    return DriftSpec(g, tuple(comp(i) for i in range(g.m)), p, q, radius, "smooth",
                     {"kind": "smooth", "amplitude": amplitude, "direction": direction.tolist(),
                      "center": center.tolist(), "plateau": plateau})


def singular_drift(g: CarnotGroupSpec, gamma: float, rho: float, amplitude: float = 1.0,
                   component: int = 1, radius: float = 1.0, p: float = 9.0, q: float = 9.0,
                   center=None, plateau: float = 0.5) -> DriftSpec:
    """b^component = amplitude * (||x||^P + rho^P)^(-gamma/P) * cutoff, other components 0.

    P = 2 r! makes ||x||^P a polynomial, so the profile is smooth for rho > 0
    and equals ||x||^-gamma once ||x|| >> rho.
    """
    if not 1 <= component <= g.m:
        raise IndexError(f"component {component} outside 1..{g.m}")
    if gamma < 0 or rho <= 0:
        raise ValueError("need gamma >= 0 and rho > 0")
    P = 2 * math.factorial(g.r) if g.r > 1 else 2
    center, chi = _localize(g, center, radius, plateau)

    def sing(t, x):
        c, rel = chi(np.asarray(x, dtype=float))
        n = homogeneous_norm(g, rel)
        return amplitude * (n ** P + rho ** P) ** (-gamma / P) * c

    def zero(t, x):
        return np.zeros(np.shape(x)[:-1])

    comps = tuple(sing if i == component - 1 else zero for i in range(g.m))
    return DriftSpec(g, comps, p, q, radius, "singular",
                     {"kind": "singular", "gamma": gamma, "rho": rho, "amplitude": amplitude,
                      "component": component, "center": center.tolist(), "plateau": plateau})


def polynomial_drift(g: CarnotGroupSpec, terms, radius: float = 1.0, p: float = 9.0,
                     q: float = 9.0, center=None, plateau: float = 0.5) -> DriftSpec:
    """``terms[i]`` is a list of (coef, powers) pairs for component i+1."""
    if len(terms) != g.m:
        raise ValueError(f"need {g.m} term lists")
    center, chi = _localize(g, center, radius, plateau)

    def comp(tl):
        def f(t, x):
            x = np.asarray(x, dtype=float)
            c, _ = chi(x)
            acc = np.zeros(x.shape[:-1])
            for coef, powers in tl:
                acc = acc + coef * np.prod(x ** np.asarray(powers, dtype=float), axis=-1)
            return acc * c
        return f

    return DriftSpec(g, tuple(comp(tl) for tl in terms), p, q, radius, "polynomial",
                     {"kind": "polynomial", "terms": [[[float(c), list(pw)] for c, pw in tl] for tl in terms],
                      "center": center.tolist(), "plateau": plateau})


def grid_drift(field_: GridField, p: float, q: float, support_radius: float) -> DriftSpec:
    """Drift from an m-component GridField (multilinear evaluation, zero outside the box)."""
    g = field_.grid.group
    if field_.ncomp != g.m:
        raise ValueError(f"grid drift needs {g.m} components")
    comps = tuple((lambda c: (lambda t, x: field_(t, x)[..., c]))(c) for c in range(g.m))
    return DriftSpec(g, comps, p, q, support_radius, "grid", {"kind": "grid"})


def horizontal_residual(g: CarnotGroupSpec, vec, x) -> tuple:
    """Least-squares horizontal coefficients of Euclidean vectors ``vec`` at ``x``.

    Returns (coefficients (..., m), relative residual (...)).
    """
    A = horizontal_field_matrix(g, x)
    vec = np.asarray(vec, dtype=float)
    # the first m rows of A are the identity, so the coefficients are vec[:m]
    coef = vec[..., : g.m]
    res = vec - np.einsum("...ni,...i->...n", A, coef)
    scale = np.linalg.norm(vec, axis=-1) + 1e-300
    return coef, np.linalg.norm(res, axis=-1) / scale * (np.linalg.norm(vec, axis=-1) > 0)


def euclidean_drift(g: CarnotGroupSpec, fn, p: float, q: float, support_radius: float,
                    probe=None, tol: float = 1e-8) -> DriftSpec:
    """Drift given as a Euclidean vector field ``fn(t, x) -> (..., N)``.

    Raises ValueError if the field is not in span{Z_1..Z_m} on the probe points.
    """
    if probe is None:
        rng = np.random.default_rng(0)
        probe = rng.uniform(-1, 1, size=(512, g.N)) * support_radius
    _, res = horizontal_residual(g, fn(0.0, probe), probe)
    if np.max(res, initial=0.0) > tol:
        raise ValueError(f"drift is not horizontal: relative off-span residual {np.max(res):.3g}")
    comps = tuple((lambda c: (lambda t, x: np.asarray(fn(t, x))[..., c]))(c) for c in range(g.m))
    return DriftSpec(g, comps, p, q, support_radius, "euclidean", {"kind": "euclidean"})


@dataclass
class AdmissibilityReport:
    group: str
    Q: int
    p: float
    q: float
    pq_value: float
    pq_ok: bool
    horizontal_ok: bool
    support_ok: bool
    derivative_norms: dict
    finite_ok: bool
    limit_exponents: dict = field(default_factory=dict)
    reasons: list = field(default_factory=list)

    @property
    def admissible(self) -> bool:
        return self.pq_ok and self.horizontal_ok and self.support_ok and self.finite_ok

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["admissible"] = self.admissible
        return d


def check_admissibility(d: DriftSpec, g: CarnotGroupSpec | None = None, grid: SpaceTimeGrid | None = None,
                        compute_norms: bool = True) -> AdmissibilityReport:
    """Check 2/q + Q/p < 1, horizontality, support and finiteness of
    ||Z_I b^i||_{L^q L^p} for |I| <= r - 1 on a grid."""
    g = g or d.group
    p, q = float(d.p), float(d.q)
    reasons = []
    val = pq_value(g, p, q)
    pq_ok = 1 < p < math.inf and 1 < q < math.inf and val < 1
    if not pq_ok:
        if not (1 < p < math.inf and 1 < q < math.inf):
            reasons.append(f"exponents must satisfy 1 < p, q < inf (p={p:g}, q={q:g})")
        else:
            reasons.append(f"2/q + Q/p: 2/{q:g}+{g.Q}/{p:g} ≥ 1 ({val:.4g})")
    horizontal_ok = d.group.N == g.N and d.group.m == g.m
    if not horizontal_ok:
        reasons.append("drift was built for a different group")
    support_ok = True
    norms = {}
    finite_ok = True
    if horizontal_ok and not d.is_zero:
        center = np.asarray(d.meta.get("center", np.zeros(g.N)), dtype=float)
        rng = np.random.default_rng(12345)
        dirs = rng.normal(size=(256, g.N))
        dirs = _scale(g, dirs, 1.0 / homogeneous_norm(g, dirs))
        outside = group_law(g, center, _scale(g, dirs, d.support_radius * rng.uniform(1.01, 2.0, 256)))
        if np.max(np.abs(d.coeffs(0.0, outside)), initial=0.0) > 0:
            support_ok = False
            reasons.append("drift does not vanish outside its support radius")
    if compute_norms and horizontal_ok and not d.is_zero:
        grid = grid or d.default_grid()
        bf = d.sample(grid)
        for c in range(g.m):
            comp = bf.component(c)
            for word in horizontal_words(g.m, g.r - 1):
                key = f"b{c + 1}" + ("" if not word else "_Z" + "".join(map(str, word)))
                val_n = mixed_norm(apply_word(comp, word), q, p)
                norms[key] = val_n
                if not math.isfinite(val_n):
                    finite_ok = False
                    reasons.append(f"||{key}|| is not finite on the grid")
    limits = {}
    if d.meta.get("kind") == "singular":
        gamma = d.meta["gamma"]
        for k in range(g.r):
            # unregularised ||x||^-(gamma+k) is locally L^p iff (gamma + k) p < Q
            limits[f"|I|={k}"] = {"exponent": (gamma + k) * p, "Q": g.Q, "ok": (gamma + k) * p < g.Q}
    return AdmissibilityReport(g.name, g.Q, p, q, val, pq_ok, horizontal_ok, support_ok,
                               norms, finite_ok, limits, reasons)


def _scale(g, x, lam):
    return x * np.asarray(lam)[:, None] ** g.weight_array
