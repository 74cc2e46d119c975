"""Space-time grids, sampled fields, group-intrinsic difference operators and
mixed-norm Sobolev norms.

Values of a scalar field are stored with shape ``(n_t + 1, *n_x)``; vector
fields carry one extra trailing component axis.  Outside the box every field
is zero.
"""
from __future__ import annotations

import functools
import itertools
import json
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, sparse

from .groups import CarnotGroupSpec, dilate, group_law, homogeneous_norm, inverse

log = logging.getLogger(__name__)

__all__ = [
    "ContractViolation",
    "DomainError",
    "MarginError",
    "SpaceTimeGrid",
    "make_grid",
    "GridField",
    "Stencils",
    "stencils",
    "interpolation_matrix",
    "horizontal_derivative",
    "horizontal_words",
    "apply_word",
    "sub_laplacian",
    "euclidean_gradient",
    "mixed_norm",
    "sobolev_norm",
    "bump",
    "mollify",
    "write_field",
    "read_field",
]


class ContractViolation(ValueError):
    """A documented precondition of an operation does not hold."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class MarginError(ContractViolation):
    """A field does not vanish on the stencil margin of its grid."""


@dataclass(frozen=True)
class SpaceTimeGrid:
    group: CarnotGroupSpec
    T: float
    n_t: int
    bounds: tuple
    n_x: tuple
    delta: float

    def __post_init__(self):
        object.__setattr__(self, "bounds", tuple(float(b) for b in self.bounds))
        object.__setattr__(self, "n_x", tuple(int(n) for n in self.n_x))
        N = self.group.N
        if len(self.bounds) != N or len(self.n_x) != N:
            raise ContractViolation(f"grid needs {N} bounds and resolutions")
        if self.n_t < 1 or min(self.n_x) < 2:
            raise ContractViolation("grid needs n_t >= 1 and n_x >= 2 in every coordinate")
        if not (self.T > 0 and self.delta > 0 and min(self.bounds) > 0):
            raise ContractViolation("T, delta and box half-widths must be positive")

    @property
    def shape(self) -> tuple:
        return self.n_x

    @property
    def size(self) -> int:
        return int(np.prod(self.n_x))

    @property
    def dt(self) -> float:
        return self.T / self.n_t

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_t + 1)

    @property
    def spacing(self) -> np.ndarray:
        return np.array([2 * R / (n - 1) for R, n in zip(self.bounds, self.n_x)])

    def axes(self) -> list:
        return [np.linspace(-R, R, n) for R, n in zip(self.bounds, self.n_x)]

    def points(self) -> np.ndarray:
        """All nodes as an array of shape (*n_x, N)."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def flat_points(self) -> np.ndarray:
        return self.points().reshape(-1, self.group.N)

    def boundary_mask(self, width: int = 1) -> np.ndarray:
        mask = np.zeros(self.n_x, dtype=bool)
        for ax, n in enumerate(self.n_x):
            idx = [slice(None)] * len(self.n_x)
            w = min(width, n)
            idx[ax] = slice(0, w)
            mask[tuple(idx)] = True
            idx[ax] = slice(n - w, n)
            mask[tuple(idx)] = True
        return mask

    def quadrature_weights(self) -> np.ndarray:
        """Trapezoid weights on the spatial nodes; they sum to the box volume."""
        w = np.ones(self.n_x)
        for ax, (n, h) in enumerate(zip(self.n_x, self.spacing)):
            v = np.full(n, h)
            v[[0, -1]] = h / 2
            shape = [1] * len(self.n_x)
            shape[ax] = n
            w = w * v.reshape(shape)
        return w

    def time_weights(self) -> np.ndarray:
        w = np.full(self.n_t + 1, self.dt)
        w[[0, -1]] = self.dt / 2
        return w

    def stable_dt(self, kappa: float = 1.0, order: int = 2) -> float:
        """Largest explicit Euler step for u_t = kappa L u with the stencil Laplacian.

        The five-point (order 4) Laplacian has a 4/3 larger spectral radius.
        """
        factor = 1.0 if order == 2 else 0.75
        return factor * self.delta ** 2 / (2 * self.group.m * kappa)

    def with_time(self, T: float, n_t: int) -> "SpaceTimeGrid":
        return SpaceTimeGrid(self.group, T, n_t, self.bounds, self.n_x, self.delta)

    def contains(self, x, margin: float = 0.0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        R = np.asarray(self.bounds) - margin
        return np.all(np.abs(x) <= R, axis=-1)

    def to_dict(self) -> dict:
        return {"group": self.group.name, "T": self.T, "n_t": self.n_t,
                "bounds": list(self.bounds), "n_x": list(self.n_x), "delta": self.delta}


def make_grid(g: CarnotGroupSpec, T: float, radius: float, h: float, *,
              bounds=None, spacing=None, kappa: float = 1.0, safety: float = 0.9,
              n_t: int | None = None, order: int = 2) -> SpaceTimeGrid:
    """Uniform grid with horizontal spacing ``h`` and delta = h.

    Coordinate j defaults to half-width ``radius**alpha_j`` plus one step and
    spacing ``h``.  Off-node stencil points use cubic interpolation, whose
    error h^4/delta^2 keeps the operators second order.  The time step is
    chosen stable for diffusion coefficient ``kappa`` unless ``n_t`` is given.
    """
    w = g.weights
    if spacing is None:
        spacing = [h] * len(w)
    if bounds is None:
        bounds = [radius ** a + s for a, s in zip(w, spacing)]
    n_x, half = [], []
    for R, s in zip(bounds, spacing):
        n = int(math.ceil(2 * R / s - 1e-9)) + 1
        n_x.append(n)
        half.append((n - 1) * s / 2)
    grid = SpaceTimeGrid(g, T, 1, tuple(half), tuple(n_x), h)
    if n_t is None:
        n_t = int(math.ceil(T / (safety * grid.stable_dt(kappa, order))))
    return grid.with_time(T, n_t)


class GridField:
    """A scalar or vector field sampled on a SpaceTimeGrid.

    ``interpolation`` is "linear" (multilinear, the default) or "cubic"
    (C^2 spline) for off-grid evaluation; time is always linear.
    """

    def __init__(self, grid: SpaceTimeGrid, values, interpolation: str = "linear"):
        values = np.asarray(values, dtype=float)
        lead = (grid.n_t + 1,) + grid.n_x
        if values.shape[: len(lead)] != lead or values.ndim > len(lead) + 1:
            raise ContractViolation(f"values shape {values.shape} does not match grid {lead}")
        if not np.all(np.isfinite(values)):
            raise ContractViolation("grid field values must be finite")
        if interpolation not in ("linear", "cubic"):
            raise ValueError("interpolation must be 'linear' or 'cubic'")
        self.grid = grid
        self.values = values
        self.interpolation = interpolation
        self._splines = {}

    @property
    def ncomp(self):
        return self.values.shape[-1] if self.values.ndim == self.grid.group.N + 2 else None

    @property
    def is_vector(self) -> bool:
        return self.ncomp is not None

    @classmethod
    def zeros(cls, grid, ncomp=None, **kw):
        shape = (grid.n_t + 1,) + grid.n_x + ((ncomp,) if ncomp else ())
        return cls(grid, np.zeros(shape), **kw)

    @classmethod
    def from_function(cls, grid, fn, ncomp=None, **kw):
        """Sample ``fn(t, x)`` (x of shape (..., N)) at every grid node."""
        pts = grid.points()
        slabs = []
        for t in grid.times:
            v = np.asarray(fn(t, pts), dtype=float)
            slabs.append(np.broadcast_to(v, grid.n_x + v.shape[len(grid.n_x):]))
        return cls(grid, np.stack(slabs), **kw)

    def with_values(self, values, interpolation=None) -> "GridField":
        return GridField(self.grid, values, interpolation or self.interpolation)

    def component(self, c: int) -> "GridField":
        return self.with_values(self.values[..., c])

    def components(self) -> list:
        if not self.is_vector:
            return [self]
        return [self.component(c) for c in range(self.ncomp)]

    def time_derivative(self) -> "GridField":
        if self.grid.n_t < 2:
            d = (self.values[1] - self.values[0]) / self.grid.dt
            return self.with_values(np.stack([d, d]))
        return self.with_values(np.gradient(self.values, self.grid.dt, axis=0, edge_order=2))

    def _fractional(self, x):
        g = self.grid
        R = np.asarray(g.bounds)
        coords = (x + R) / g.spacing
        inside = np.all((coords >= -1e-9) & (coords <= np.asarray(g.n_x) - 1 + 1e-9), axis=-1)
        return coords, inside

    def _slab(self, k, c):
        if self.interpolation == "linear":
            return self.values[k] if c is None else self.values[k][..., c]
        key = (k, c)
        if key not in self._splines:
            arr = self.values[k] if c is None else self.values[k][..., c]
            self._splines[key] = ndimage.spline_filter(arr, order=3, mode="mirror")
        return self._splines[key]

    def _eval_slab(self, k, coords, c):
        order = 1 if self.interpolation == "linear" else 3
        return ndimage.map_coordinates(self._slab(k, c), coords.T, order=order,
                                       mode="mirror", prefilter=False)

    def __call__(self, t, x) -> np.ndarray:
        """Evaluate at times ``t`` (scalar or per-point) and points ``x`` (..., N)."""
        x = np.asarray(x, dtype=float)
        batch = x.shape[:-1]
        pts = x.reshape(-1, x.shape[-1])
        coords, inside = self._fractional(pts)
        t = np.broadcast_to(np.asarray(t, dtype=float), batch).reshape(-1)
        g = self.grid
        s = np.clip(t / g.dt, 0.0, g.n_t)
        k0 = np.minimum(np.floor(s).astype(int), g.n_t - 1)
        theta = s - k0
        comps = [None] if not self.is_vector else list(range(self.ncomp))
        out = np.zeros((pts.shape[0], len(comps)))
        idx_in = np.nonzero(inside)[0]
        for k in np.unique(k0[idx_in]):
            sel = idx_in[k0[idx_in] == k]
            cs = coords[sel]
            th = theta[sel]
            for j, c in enumerate(comps):
                a = self._eval_slab(k, cs, c)
                b = self._eval_slab(k + 1, cs, c) if np.any(th > 0) else a
                out[sel, j] = (1 - th) * a + th * b
        if not self.is_vector:
            return out[:, 0].reshape(batch)
        return out.reshape(batch + (self.ncomp,))


# ---------------------------------------------------------------------------
# group-intrinsic stencils


def _lagrange_weights(s, npts):
    """Lagrange weights at offset s for the nodes -(npts/2 - 1) .. npts/2."""
    nodes = np.arange(npts) - (npts // 2 - 1)
    w = np.ones(s.shape + (npts,))
    for j, xj in enumerate(nodes):
        for xk in nodes:
            if xk != xj:
                w[..., j] *= (s - xk) / (xj - xk)
    return w


def interpolation_matrix(grid: SpaceTimeGrid, pts, npts: int = 4) -> sparse.csr_matrix:
    """Sparse matrix mapping node values to values at ``pts`` (P, N).

    Tensor Lagrange interpolation on ``npts`` nodes per axis (cubic for 4,
    quintic for 6; linear on axes with too few nodes); rows of points
    outside the box are zero.  Offsets within 1e-9 of a node snap to it, so
    node-aligned shifts are exact.
    """
    pts = np.asarray(pts, dtype=float)
    P = pts.shape[0]
    R = np.asarray(grid.bounds)
    u = (pts + R) / grid.spacing
    n = np.asarray(grid.n_x)
    inside = np.all((u >= -1e-9) & (u <= n - 1 + 1e-9), axis=1)
    near = np.round(u)
    u = np.where(np.abs(u - near) < 1e-9, near, u)
    idx_axes, w_axes = [], []
    half = npts // 2 - 1
    for ax in range(grid.group.N):
        ua = u[:, ax]
        na = grid.n_x[ax]
        k = npts if na >= npts else 2
        lo = half if k == npts else 0
        base = np.clip(np.floor(ua).astype(int) - lo, 0, na - k)
        s = ua - (base + lo)
        w = _lagrange_weights(s, k)
        idx = base[:, None] + np.arange(k)
        w[np.abs(w) < 1e-13] = 0.0
        idx_axes.append(idx)
        w_axes.append(w)
    strides = np.cumprod((1,) + grid.n_x[::-1])[::-1][1:]
    rows, cols, vals = [], [], []
    for combo in itertools.product(*[range(w.shape[1]) for w in w_axes]):
        wt = np.ones(P)
        col = np.zeros(P, dtype=np.int64)
        for ax, c in enumerate(combo):
            wt = wt * w_axes[ax][:, c]
            col = col + idx_axes[ax][:, c] * strides[ax]
        keep = inside & (wt != 0)
        rows.append(np.nonzero(keep)[0])
        cols.append(col[keep])
        vals.append(wt[keep])
    mat = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                            shape=(P, grid.size))
    return mat.tocsr()


@dataclass(frozen=True)
class Stencils:
    D: tuple
    L: sparse.csr_matrix
    order: int
    escaped: int


@functools.lru_cache(maxsize=16)
def stencils(grid: SpaceTimeGrid, order: int = 2) -> Stencils:
    """First-difference and sub-Laplacian matrices along horizontal flow lines.

    With s_k u(x) = u(x o (k delta e_i)), order 2 uses
    ``D_i = (s_1 - s_-1) / 2 delta`` and ``L = sum_i (s_1 + s_-1 - 2) / delta^2``
    (cubic interpolation off nodes); order 4 uses the five-point formulas
    on shifts -2..2 with quintic interpolation.
    """
    if order not in (2, 4):
        raise ValueError("stencil order must be 2 or 4")
    g = grid.group
    pts = grid.flat_points()
    d = grid.delta
    npts = 4 if order == 2 else 6
    I = sparse.identity(grid.size, format="csr")
    D = []
    L = sparse.csr_matrix((grid.size, grid.size))
    escaped = 0
    reach = (1,) if order == 2 else (1, 2)
    for i in range(g.m):
        S = {}
        for k in reach:
            for sgn in (1, -1):
                e = np.zeros(g.N)
                e[i] = sgn * k * d
                x = group_law(g, pts, e)
                escaped += int(np.sum(~grid.contains(x)))
                S[sgn * k] = interpolation_matrix(grid, x, npts)
        if order == 2:
            D.append(((S[1] - S[-1]) / (2 * d)).tocsr())
            L = L + (S[1] + S[-1] - 2 * I) / d ** 2
        else:
            D.append(((8 * (S[1] - S[-1]) - (S[2] - S[-2])) / (12 * d)).tocsr())
            L = L + (16 * (S[1] + S[-1]) - (S[2] + S[-2]) - 30 * I) / (12 * d ** 2)
    if escaped:
        log.debug("stencil leaves the box at %d node shifts; zero extension used", escaped)
    return Stencils(tuple(D), L.tocsr(), order, escaped)


def _apply(field: GridField, mat) -> GridField:
    v = field.values
    nt = v.shape[0]
    if field.is_vector:
        flat = v.reshape(nt, -1, v.shape[-1])
        out = np.stack([(mat @ flat[k]) for k in range(nt)])
    else:
        out = (mat @ v.reshape(nt, -1).T).T
    return field.with_values(out.reshape(v.shape))


def horizontal_derivative(field: GridField, i: int, delta: float | None = None,
                          order: int = 2) -> GridField:
    """Z_i f by group-intrinsic central differences (1-based i)."""
    grid = field.grid
    if not 1 <= i <= grid.group.m:
        raise IndexError(f"horizontal index {i} outside 1..{grid.group.m}")
    if delta is not None and not math.isclose(delta, grid.delta):
        grid = SpaceTimeGrid(grid.group, grid.T, grid.n_t, grid.bounds, grid.n_x, float(delta))
    return _apply(field, stencils(grid, order).D[i - 1])


def sub_laplacian(field: GridField, order: int = 2) -> GridField:
    return _apply(field, stencils(field.grid, order).L)


def horizontal_words(m: int, k: int) -> list:
    """All words over 1..m of length at most k, shortest first."""
    words = [()]
    for length in range(1, k + 1):
        words.extend(itertools.product(range(1, m + 1), repeat=length))
    return words


def apply_word(field: GridField, word, order: int = 2) -> GridField:
    """Z_I f = Z_{i1}(Z_{i2}(... Z_{ik} f))."""
    out = field
    for i in reversed(tuple(word)):
        out = horizontal_derivative(out, i, order=order)
    return out


def euclidean_gradient(field: GridField) -> np.ndarray:
    """Central-difference Euclidean gradient; shape values.shape + (N,)."""
    g = field.grid
    axes = tuple(range(1, g.group.N + 1))
    grads = np.gradient(field.values, *g.spacing, axis=axes, edge_order=2)
    if g.group.N == 1:
        grads = [grads]
    return np.stack(grads, axis=-1)


# ---------------------------------------------------------------------------
# norms


def _space_norm(values, grid, p):
    spatial = tuple(range(1, grid.group.N + 1))
    a = np.abs(values)
    if math.isinf(p):
        return np.max(a, axis=spatial)
    w = grid.quadrature_weights()
    return np.sum(a ** p * w, axis=spatial) ** (1.0 / p)


def mixed_norm(field: GridField, q_exp: float, p_exp: float) -> float:
    """L^q in time of L^p in space by trapezoid quadrature.

    Vector fields use the sum of component norms.  Infinite exponents are
    grid maxima (lower bounds of essential suprema).
    """
    q, p = float(q_exp), float(p_exp)
    if q < 1 or p < 1:
        raise DomainError("exponents must be >= 1")
    total = 0.0
    for comp in field.components():
        s = _space_norm(comp.values, field.grid, p)
        if math.isinf(q):
            total += float(np.max(s))
        else:
            total += float(np.sum(s ** q * field.grid.time_weights()) ** (1.0 / q))
    return total


def _margin_ok(field: GridField, k: int, rtol: float) -> bool:
    if k == 0:
        return True
    grid = field.grid
    g = grid.group
    pts = grid.flat_points()
    reach = np.zeros(g.N)
    for i in range(g.m):
        e = np.zeros(g.N)
        e[i] = grid.delta
        reach = np.maximum(reach, np.max(np.abs(group_law(g, pts, e) - pts), axis=0))
    width = int(np.max(np.ceil(k * reach / grid.spacing)))
    scale = np.max(np.abs(field.values))
    if scale == 0:
        return True
    ring = grid.boundary_mask(width)
    vals = np.abs(field.values)[:, ring]
    return float(np.max(vals)) <= rtol * scale


def sobolev_norm(field: GridField, k: int, q_exp: float, p_exp: float, *,
                 check_margin: bool = True, margin_rtol: float = 1e-3, order: int = 2) -> float:
    """sum over words |I| <= k of mixed_norm(Z_I f)."""
    if k < 0:
        raise DomainError("k must be >= 0")
    if check_margin and not _margin_ok(field, k, margin_rtol):
        raise MarginError(f"field does not vanish within the {k}-step stencil margin of the box")
    m = field.grid.group.m
    total = 0.0
    cache = {(): field}
    for word in horizontal_words(m, k):
        if word not in cache:
            cache[word] = horizontal_derivative(cache[word[1:]], word[0], order=order)
        total += mixed_norm(cache[word], q_exp, p_exp)
    return total


# ---------------------------------------------------------------------------
# mollifiers


def bump(s):
    """Smooth radial profile exp(1 - 1/(1 - s^2)) on |s| < 1, zero outside."""
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - s[inside] ** 2))
    return out


def _mollifier_nodes(g, phi, n_nodes):
    ax = (np.arange(n_nodes) + 0.5) / n_nodes * 2 - 1
    z = np.stack(np.meshgrid(*([ax] * g.N), indexing="ij"), axis=-1).reshape(-1, g.N)
    w = phi(z)
    if np.any(w < 0):
        raise ContractViolation("mollifier profile must be nonnegative")
    keep = w > 0
    if not np.any(keep):
        raise ContractViolation("mollifier profile vanishes on its quadrature nodes")
    return z[keep], w[keep] / np.sum(w[keep])


def mollify(field: GridField, n: float, phi=None, n_nodes: int = 9) -> GridField:
    """Group convolution f * phi_n with phi_n(x) = n^Q phi(D(n) x).

    ``phi(z)`` must be nonnegative and supported in the unit homogeneous
    ball; the default is ``bump(||z||)``.  Quadrature weights are normalised
    to unit mass, so constants are reproduced exactly.
    """
    g = field.grid.group
    if n <= 0:
        raise DomainError("scale index must be positive")
    if phi is None:
        def phi(z):
            return bump(homogeneous_norm(g, z))
    z, w = _mollifier_nodes(g, phi, n_nodes)
    shifts = inverse(g, dilate(g, 1.0 / n, z))
    pts = field.grid.flat_points()
    out = np.zeros_like(field.values)
    lin = GridField(field.grid, field.values, "linear")
    for k, t in enumerate(field.grid.times):
        acc = 0.0
        for zk, wk in zip(shifts, w):
            acc = acc + wk * lin(t, group_law(g, pts, zk))
        out[k] = np.reshape(acc, out[k].shape)
    return field.with_values(out)


# ---------------------------------------------------------------------------
# field I/O

_MAGIC = b"CLFIELD1"


def write_field(field: GridField, path, fmt: str | None = None) -> None:
    """Write a field as CSV (t, x_1..x_N, value[s]) or binary with JSON header."""
    from pathlib import Path

    path = Path(path)
    fmt = fmt or ("csv" if path.suffix == ".csv" else "bin")
    grid = field.grid
    if fmt == "csv":
        N = grid.group.N
        pts = grid.flat_points()
        ncomp = field.ncomp or 1
        cols = ["t"] + [f"x_{j + 1}" for j in range(N)]
        cols += ["value"] if not field.is_vector else [f"value_{c + 1}" for c in range(ncomp)]
        rows = []
        for k, t in enumerate(grid.times):
            v = field.values[k].reshape(-1, ncomp)
            rows.append(np.column_stack([np.full(len(pts), t), pts, v]))
        np.savetxt(path, np.vstack(rows), delimiter=",", header=",".join(cols),
                   comments="", fmt="%.17g")
        return
    header = json.dumps({"shape": list(field.values.shape), "dtype": "<f8",
                         "interpolation": field.interpolation, "grid": grid.to_dict()}).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(np.uint32(len(header)).tobytes())
        fh.write(header)
        fh.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())


def read_field(path, group: CarnotGroupSpec | None = None) -> GridField:
    """Read a field written by ``write_field`` in binary format."""
    from .groups import load_group

    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ContractViolation(f"{path} is not a field file")
        n = int(np.frombuffer(fh.read(4), dtype=np.uint32)[0])
        header = json.loads(fh.read(n))
        data = np.frombuffer(fh.read(), dtype="<f8")
    gd = header["grid"]
    g = group or load_group(gd["group"])
    grid = SpaceTimeGrid(g, gd["T"], gd["n_t"], tuple(gd["bounds"]), tuple(gd["n_x"]), gd["delta"])
    return GridField(grid, data.reshape(header["shape"]).copy(), header.get("interpolation", "linear"))
