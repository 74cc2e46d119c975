"""Homogeneous Carnot groups in exponential coordinates of the first kind.

A group is described by a graded nilpotent Lie algebra on R^N: integer
dilation weights and structure constants ``c[i, j, k]`` with
``[e_i, e_j] = sum_k c[i, j, k] e_k``.  The group law is the truncated
Baker-Campbell-Hausdorff series, which is exact up to step 4.

All point arguments are arrays whose last axis has length N; leading axes
are treated as batch dimensions.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "GroupSpecError",
    "CarnotGroupSpec",
    "euclidean",
    "heisenberg1",
    "engel",
    "builtin_group",
    "BUILTIN_GROUPS",
    "load_group",
    "group_law",
    "inverse",
    "dilate",
    "homogeneous_norm",
    "bracket",
    "horizontal_field_matrix",
    "right_field_matrix",
    "field_matrix",
    "field_jacobian",
    "commutator_field",
    "nested_bracket_field",
]

MAX_STEP = 4

# Taylor coefficients of z/(1 - exp(-z)) and z/(exp(z) - 1) up to z^4.
_LEFT_COEFFS = (1.0, 0.5, 1.0 / 12.0, 0.0, -1.0 / 720.0)
_RIGHT_COEFFS = (1.0, -0.5, 1.0 / 12.0, 0.0, -1.0 / 720.0)


class GroupSpecError(ValueError):
    """Raised when a group description violates the Carnot invariants."""


@dataclass(frozen=True, eq=False)
class CarnotGroupSpec:
    name: str
    weights: tuple
    structure_constants: np.ndarray = field(repr=False)

    def __post_init__(self):
        w = tuple(int(a) for a in self.weights)
        object.__setattr__(self, "weights", w)
        c = np.array(self.structure_constants, dtype=float)
        c.setflags(write=False)
        object.__setattr__(self, "structure_constants", c)
        terms = {}
        for i, j, k in zip(*np.nonzero(c)):
            terms.setdefault(int(k), []).append((int(i), int(j), float(c[i, j, k])))
        object.__setattr__(self, "_bracket_terms", terms)

    def __eq__(self, other):
        if not isinstance(other, CarnotGroupSpec):
            return NotImplemented
        return (self.name == other.name and self.weights == other.weights
                and np.array_equal(self.structure_constants, other.structure_constants))

    def __hash__(self):
        return hash((self.name, self.weights, self.structure_constants.tobytes()))

    @property
    def N(self) -> int:
        return len(self.weights)

    @property
    def m(self) -> int:
        return sum(1 for a in self.weights if a == 1)

    @property
    def r(self) -> int:
        return max(self.weights)

    @property
    def Q(self) -> int:
        return sum(self.weights)

    @property
    def layer_dims(self) -> tuple:
        return tuple(self.weights.count(k) for k in range(1, self.r + 1))

    @property
    def weight_array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=float)

    @property
    def is_abelian(self) -> bool:
        return self.r == 1

    def validate(self, tol: float = 1e-12) -> "CarnotGroupSpec":
        """Check every structural invariant; raise GroupSpecError on failure."""
        w = np.asarray(self.weights)
        N = self.N
        if N < 1:
            raise GroupSpecError("group must have at least one coordinate")
        if np.any(w < 1):
            raise GroupSpecError("dilation weights must be positive integers")
        if np.any(np.diff(w) < 0):
            raise GroupSpecError("dilation weights must be nondecreasing")
        if self.r > MAX_STEP:
            raise GroupSpecError(f"nilpotency step {self.r} > {MAX_STEP} is not supported")
        missing = [k for k in range(1, self.r + 1) if k not in self.weights]
        if missing:
            raise GroupSpecError(f"weights skip layer(s) {missing}")
        c = self.structure_constants
        if c.shape != (N, N, N):
            raise GroupSpecError(f"structure constants must have shape {(N, N, N)}, got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise GroupSpecError("structure constants must be finite")
        if np.max(np.abs(c + c.transpose(1, 0, 2)), initial=0.0) > tol:
            raise GroupSpecError("structure constants are not antisymmetric")
        graded = w[:, None, None] + w[None, :, None] == w[None, None, :]
        if np.max(np.abs(np.where(graded, 0.0, c)), initial=0.0) > tol:
            raise GroupSpecError("structure constants break the grading alpha_k = alpha_i + alpha_j")
        # Jacobi: [e_i,[e_j,e_k]] + cyclic = 0
        jac = (
            np.einsum("jkl,ilm->ijkm", c, c)
            + np.einsum("kil,jlm->ijkm", c, c)
            + np.einsum("ijl,klm->ijkm", c, c)
        )
        if np.max(np.abs(jac), initial=0.0) > tol:
            raise GroupSpecError("Jacobi identity fails")
        # stratification: V_{k+1} = [V_k, V_1] must span layer k+1
        m = self.m
        layer = np.eye(N)[:m]
        for k in range(2, self.r + 1):
            prods = np.einsum("ai,bj,ijk->abk", layer, np.eye(N)[:m], c).reshape(-1, N)
            rank = np.linalg.matrix_rank(prods, tol=1e-9) if prods.size else 0
            if rank != self.layer_dims[k - 1]:
                raise GroupSpecError(f"layer {k} is not generated by brackets of the first layer")
            layer = prods
        return self

    def to_json_dict(self) -> dict:
        c = self.structure_constants
        brackets = []
        for i, j, k in zip(*np.nonzero(c)):
            if i < j:
                brackets.append({"i": int(i) + 1, "j": int(j) + 1, "k": int(k) + 1, "c": float(c[i, j, k])})
        return {"name": self.name, "N": self.N, "m": self.m, "r": self.r,
                "weights": list(self.weights), "brackets": brackets}


def _spec_from_brackets(name, weights, brackets) -> CarnotGroupSpec:
    N = len(weights)
    c = np.zeros((N, N, N))
    for i, j, k, val in brackets:
        c[i, j, k] += val
        c[j, i, k] -= val
    return CarnotGroupSpec(name, tuple(weights), c).validate()


def euclidean(d: int) -> CarnotGroupSpec:
    if d < 1:
        raise GroupSpecError("dimension must be >= 1")
    return _spec_from_brackets(f"euclidean{d}", (1,) * d, [])


def heisenberg1() -> CarnotGroupSpec:
    return _spec_from_brackets("heisenberg1", (1, 1, 2), [(0, 1, 2, 1.0)])


def engel() -> CarnotGroupSpec:
    return _spec_from_brackets("engel", (1, 1, 2, 3), [(0, 1, 2, 1.0), (0, 2, 3, 1.0)])


BUILTIN_GROUPS = {
    "euclidean1": lambda: euclidean(1),
    "euclidean2": lambda: euclidean(2),
    "euclidean3": lambda: euclidean(3),
    "heisenberg1": heisenberg1,
    "engel": engel,
}


def builtin_group(name: str) -> CarnotGroupSpec:
    try:
        return BUILTIN_GROUPS[name]()
    except KeyError:
        raise GroupSpecError(f"unknown built-in group {name!r}; choose from {sorted(BUILTIN_GROUPS)}") from None


def load_group(source) -> CarnotGroupSpec:
    """Load a group from a built-in name, a JSON path, or a parsed dict.

    File schema: ``{name, N, m, r, weights[], brackets[{i, j, k, c}]}`` with
    1-based indices; each bracket entry sets ``[e_i, e_j] += c e_k``.
    """
    if isinstance(source, CarnotGroupSpec):
        return source
    if isinstance(source, dict):
        data = source
    else:
        s = str(source)
        if s in BUILTIN_GROUPS:
            return builtin_group(s)
        path = Path(s)
        if not path.exists():
            raise FileNotFoundError(f"group spec file not found: {path}")
        data = json.loads(path.read_text())
    try:
        weights = [int(a) for a in data["weights"]]
        raw = data.get("brackets", [])
        brackets = [(int(b["i"]) - 1, int(b["j"]) - 1, int(b["k"]) - 1, float(b["c"])) for b in raw]
    except (KeyError, TypeError, ValueError) as exc:
        raise GroupSpecError(f"malformed group spec: {exc}") from exc
    N = len(weights)
    for i, j, k, _ in brackets:
        if not (0 <= i < N and 0 <= j < N and 0 <= k < N):
            raise GroupSpecError(f"bracket index out of range 1..{N}")
    spec = _spec_from_brackets(data.get("name", "custom"), weights, brackets)
    for key, actual in (("N", spec.N), ("m", spec.m), ("r", spec.r)):
        if key in data and int(data[key]) != actual:
            raise GroupSpecError(f"declared {key}={data[key]} disagrees with weights ({actual})")
    return spec


def _points(g: CarnotGroupSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (g.N,):
        raise ValueError(f"expected points with last axis {g.N} for {g.name}, got shape {x.shape}")
    return x


def bracket(g: CarnotGroupSpec, a, b) -> np.ndarray:
    """Lie bracket of algebra elements (coordinates in the graded basis)."""
    a = _points(g, a)
    b = _points(g, b)
    out = np.zeros(np.broadcast_shapes(a.shape, b.shape))
    for k, terms in g._bracket_terms.items():
        acc = 0.0
        for i, j, c in terms:
            acc = acc + c * a[..., i] * b[..., j]
        out[..., k] = acc
    return out


def group_law(g: CarnotGroupSpec, x, y) -> np.ndarray:
    """x o y via the BCH series truncated at the group's step."""
    x = _points(g, x)
    y = _points(g, y)
    if g.r == 1:
        return x + y
    xy = bracket(g, x, y)
    z = x + y + 0.5 * xy
    if g.r >= 3:
        z = z + (bracket(g, x, xy) - bracket(g, y, xy)) / 12.0
    if g.r >= 4:
        z = z - bracket(g, y, bracket(g, x, xy)) / 24.0
    return z


def inverse(g: CarnotGroupSpec, x) -> np.ndarray:
    return -_points(g, x)


def dilate(g: CarnotGroupSpec, lam, x) -> np.ndarray:
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0):
        raise ValueError("dilation factor must be positive")
    x = _points(g, x)
    return x * lam[..., None] ** g.weight_array


def homogeneous_norm(g: CarnotGroupSpec, x) -> np.ndarray:
    """(sum_j |x_j|^(2 r!/alpha_j))^(1/(2 r!)), evaluated without overflow."""
    x = _points(g, x)
    a = np.abs(x) ** (1.0 / g.weight_array)
    if g.r == 1:
        return np.sqrt(np.sum(a * a, axis=-1))
    power = 2 * math.factorial(g.r)
    scale = np.max(a, axis=-1, keepdims=True)
    safe = np.where(scale > 0, scale, 1.0)
    s = np.sum((a / safe) ** power, axis=-1) ** (1.0 / power)
    return scale[..., 0] * s


def _series_field(g, x, basis_index, coeffs):
    """sum_k coeffs[k] ad_x^k e_j for each requested basis index j; shape (..., N, len(idx))."""
    x = _points(g, x)
    idx = list(basis_index)
    v = np.broadcast_to(np.eye(g.N)[idx], x.shape[:-1] + (len(idx), g.N)).copy()
    xb = x[..., None, :]
    out = coeffs[0] * v
    for k in range(1, g.r):
        v = bracket(g, np.broadcast_to(xb, v.shape), v)
        if coeffs[k]:
            out = out + coeffs[k] * v
    return np.swapaxes(out, -1, -2)


def horizontal_field_matrix(g: CarnotGroupSpec, x) -> np.ndarray:
    """N x m matrix whose column i is the left-invariant field Z_i at x."""
    return _series_field(g, x, range(g.m), _LEFT_COEFFS)


def right_field_matrix(g: CarnotGroupSpec, x) -> np.ndarray:
    """N x m matrix of the right-invariant fields agreeing with d/dx_i at 0."""
    return _series_field(g, x, range(g.m), _RIGHT_COEFFS)


def field_matrix(g: CarnotGroupSpec, x, right: bool = False) -> np.ndarray:
    """Full N x N frame of left (or right) invariant fields, one per basis vector."""
    return _series_field(g, x, range(g.N), _RIGHT_COEFFS if right else _LEFT_COEFFS)


def field_jacobian(g: CarnotGroupSpec, x, i: int) -> np.ndarray:
    """Euclidean Jacobian Z_i'(x) (N x N) of the left-invariant field Z_i (0-based i).

    Column l holds the derivative of Z_i in direction e_l, obtained by
    differentiating the polynomial series term by term.
    """
    x = _points(g, x)
    N = g.N
    ei = np.zeros(N)
    ei[i] = 1.0
    jac = np.zeros(x.shape[:-1] + (N, N))
    for l in range(N):
        el = np.zeros(N)
        el[l] = 1.0
        total = np.zeros(x.shape)
        for k in range(1, g.r):
            if not _LEFT_COEFFS[k]:
                continue
            for j in range(k):
                w = np.broadcast_to(ei, x.shape)
                for _ in range(k - 1 - j):
                    w = bracket(g, x, w)
                w = bracket(g, np.broadcast_to(el, x.shape), w)
                for _ in range(j):
                    w = bracket(g, x, w)
                total = total + _LEFT_COEFFS[k] * w
        jac[..., :, l] = total
    return jac


def commutator_field(g: CarnotGroupSpec, i: int, j: int, x) -> np.ndarray:
    """[Z_i, Z_j] at x for 1-based horizontal indices, via structure constants."""
    for a in (i, j):
        if not 1 <= a <= g.m:
            raise IndexError(f"horizontal index {a} outside 1..{g.m}")
    return nested_bracket_field(g, (i, j), x)


def nested_bracket_field(g: CarnotGroupSpec, word, x) -> np.ndarray:
    """Right-nested bracket [Z_w1, [Z_w2, ... Z_wk]] at x (1-based indices <= N).

    Left-invariant fields realise the algebra, so the bracket of fields is the
    left-invariant field of the algebra bracket.
    """
    word = list(word)
    if not word or any(not 1 <= a <= g.N for a in word):
        raise IndexError(f"bracket word {word} has indices outside 1..{g.N}")
    eye = np.eye(g.N)
    v = eye[word[-1] - 1]
    for a in reversed(word[:-1]):
        v = bracket(g, eye[a - 1], v)
    frame = field_matrix(g, x)
    return frame @ v
