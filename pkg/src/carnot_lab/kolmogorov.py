"""Explicit solvers for the sub-Laplacian heat equation and the backward
Kolmogorov equation with a horizontal drift.

Forward problem (``kappa`` = 1 for the heat equation)::

    u_t = kappa L u - lam u + f,        u(0) = 0

Backward problem, solved by reversing time::

    u_t + kappa L u + sum_i b^i Z_i u - lam u = f,   u(T) = 0

Both use the stencil operators of :mod:`carnot_lab.fields` with explicit Euler
steps, an exact ``exp(-lam dt)`` factor and Dirichlet zero boundary nodes.
The drift term is handled by Picard iteration over whole trajectories, with
automatic splitting of the horizon when the iteration stops contracting.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .drift import DriftSpec
from .fields import (
    ContractViolation,
    GridField,
    SpaceTimeGrid,
    euclidean_gradient,
    horizontal_words,
    mixed_norm,
    sobolev_norm,
    stencils,
)
from .groups import CarnotGroupSpec, field_jacobian, horizontal_field_matrix

log = logging.getLogger(__name__)

__all__ = [
    "StabilityError",
    "PicardError",
    "LambdaSelectionError",
    "PdeSolution",
    "solve_heat",
    "solve_kolmogorov",
    "select_lambda",
    "apriori_heat_check",
    "plugin_residual",
    "grad_sup",
    "horizontal_sups",
]

RESIDUAL_FLAG = 1e-3


class StabilityError(ContractViolation):
    def __init__(self, dt, required):
        super().__init__(f"explicit step dt={dt:.4g} exceeds the stability bound; need dt <= {required:.4g}")
        self.dt = dt
        self.required = required


class PicardError(RuntimeError):
    """Picard iteration failed to contract even after splitting the horizon."""


class LambdaSelectionError(RuntimeError):
    """No lambda up to the cap met the derivative bounds."""


@dataclass
class PdeSolution:
    u: GridField
    residual_norm: float
    iterations: int
    lam: float
    grad_sup: float
    kappa: float
    backward: bool
    diagnostics: dict = field(default_factory=dict)

    @property
    def residual_flagged(self) -> bool:
        return self.residual_norm > RESIDUAL_FLAG


# ---------------------------------------------------------------------------
# core stepper


def _as_stack(field_: GridField) -> np.ndarray:
    """Values as (n_t + 1, P, C)."""
    v = field_.values
    nt1 = v.shape[0]
    if field_.is_vector:
        return v.reshape(nt1, -1, v.shape[-1])
    return v.reshape(nt1, -1, 1)


def _from_stack(grid: SpaceTimeGrid, arr: np.ndarray, vector: bool, interpolation="linear") -> GridField:
    shape = (arr.shape[0],) + grid.n_x + ((arr.shape[-1],) if vector else ())
    return GridField(grid, arr.reshape(shape), interpolation)


def _check_dt(grid: SpaceTimeGrid, kappa: float, order: int = 2):
    bound = grid.stable_dt(kappa, order)
    if grid.dt > bound * (1 + 1e-12):
        raise StabilityError(grid.dt, bound)


def _boundary(grid: SpaceTimeGrid) -> np.ndarray:
    return grid.boundary_mask(1).reshape(-1)


def _evolve(grid, kappa, lam, forcing, drift=None, prev=None, start=None, lo=0, hi=None,
            scheme="euler", order=2):
    """March the reversed-time equation v_s = kappa L v - lam v + F + sum_i d_i D_i w.

    ``w`` is ``prev`` (a frozen Picard iterate) or the current state.
    ``scheme="euler"`` is explicit Euler with an exact exp(-lam dt) factor;
    ``scheme="heun"`` is the second-order exponential (Lawson) Heun method,
    with the same stability bound.  Steps run over marching indices lo..hi;
    ``start`` is v^lo.
    """
    st = stencils(grid, order)
    dt = grid.dt
    decay = math.exp(-lam * dt)
    hi = grid.n_t if hi is None else hi
    bnd = _boundary(grid)
    C = forcing.shape[-1]
    out = np.zeros((hi - lo + 1, grid.size, C))
    out[0] = 0.0 if start is None else start

    def rhs(n, v, w):
        r = kappa * (st.L @ v) + forcing[n]
        if drift is not None:
            for i, D in enumerate(st.D):
                r += drift[n][:, i, None] * (D @ w)
        return r

    for n in range(lo, hi):
        v = out[n - lo]
        k1 = rhs(n, v, v if prev is None else prev[n - lo])
        nxt = decay * (v + dt * k1)
        if scheme == "heun":
            nxt[bnd] = 0.0
            k2 = rhs(n + 1, nxt, nxt if prev is None else prev[n - lo + 1])
            nxt = decay * (v + 0.5 * dt * k1) + 0.5 * dt * k2
        elif scheme != "euler":
            raise ValueError(f"unknown time scheme {scheme!r}")
        nxt[bnd] = 0.0
        out[n - lo + 1] = nxt
    return out


def _s1_distance(grid, diff, q, p, order=2):
    """S^{1,(q,p)} norm of a (n, P, C) stack restricted to its own time window."""
    n = diff.shape[0]
    sub = grid.with_time(grid.dt * max(n - 1, 1), max(n - 1, 1))
    if n == 1:
        diff = np.concatenate([diff, diff])
    f = _from_stack(sub, diff, True)
    return sobolev_norm(f, 1, q, p, check_margin=False, order=order)


# ---------------------------------------------------------------------------
# independent plug-in residual (Euclidean finite differences)


_D1 = np.array([-1 / 60, 3 / 20, -3 / 4, 0.0, 3 / 4, -3 / 20, 1 / 60])
_D2 = np.array([1 / 90, -3 / 20, 3 / 2, -49 / 18, 3 / 2, -3 / 20, 1 / 90])


def _central(arr, h, axis, coeffs, power):
    """Seven-point sixth-order central difference; second order near the edges."""
    if power == 1:
        out = np.gradient(arr, h, axis=axis, edge_order=2)
    else:
        out = np.gradient(np.gradient(arr, h, axis=axis, edge_order=2), h, axis=axis, edge_order=2)
    n = arr.shape[axis]
    if n >= 7:
        a = np.moveaxis(arr, axis, 0)
        o = np.moveaxis(out, axis, 0)
        o[3:-3] = sum(c * a[j:n - 6 + j] for j, c in enumerate(coeffs) if c) / h ** power
    return out


class _PlugIn:
    def __init__(self, grid: SpaceTimeGrid):
        g = grid.group
        pts = grid.flat_points()
        self.grid = grid
        self.A = horizontal_field_matrix(g, pts)  # (P, N, m)
        # Z_i Z_i u = A_i^T H A_i + (Z_i' Z_i) . grad u
        self.corr = np.stack([field_jacobian(g, pts, i) @ self.A[:, :, i][..., None]
                              for i in range(g.m)], axis=-1)[:, :, 0, :]  # (P, N, m)

    def derivatives(self, slab):
        """Gradient (P, N) and Hessian (P, N, N) of one spatial slab.

        Sixth-order central differences away from the box edges.
        """
        grid = self.grid
        N = grid.group.N
        arr = slab.reshape(grid.n_x)
        h = grid.spacing
        grads = [_central(arr, h[ax], ax, _D1, 1) for ax in range(N)]
        H = np.empty((grid.size, N, N))
        for j in range(N):
            H[:, j, j] = _central(arr, h[j], j, _D2, 2).reshape(-1)
            for k in range(j + 1, N):
                hk = _central(grads[j], h[k], k, _D1, 1).reshape(-1)
                H[:, j, k] = hk
                H[:, k, j] = hk
        G = np.stack([gj.reshape(-1) for gj in grads], axis=-1)
        return G, H

    def operators(self, slab):
        """(Z_1 u .. Z_m u) as (P, m) and L u as (P,)."""
        G, H = self.derivatives(slab)
        Zu = np.einsum("pn,pni->pi", G, self.A)
        Lu = np.einsum("pni,pnk,pki->p", self.A, H, self.A) + np.einsum("pn,pni->p", G, self.corr)
        return Zu, Lu


def plugin_residual(sol: PdeSolution, f: GridField, drift: DriftSpec | None = None,
                    margin: int = 4) -> float:
    """Discrete space-time L^2 norm of the PDE residual on interior nodes.

    Derivatives come from Euclidean finite differences applied to the
    horizontal fields' coefficients, independent of the stencil operators.
    """
    grid = sol.u.grid
    U = _as_stack(sol.u)
    F = _as_stack(f) if f is not None else np.zeros_like(U)
    if F.shape[-1] != U.shape[-1]:
        F = np.broadcast_to(F, U.shape)
    pi = _PlugIn(grid)
    interior = ~grid.boundary_mask(margin).reshape(-1)
    wx = grid.quadrature_weights().reshape(-1)[interior]
    wt = grid.time_weights()
    Ut = np.gradient(U, grid.dt, axis=0, edge_order=2) if grid.n_t >= 2 else np.repeat(
        (U[1:] - U[:1]) / grid.dt, 2, axis=0)
    sgn = 1.0 if sol.backward else -1.0
    pts = grid.flat_points()
    total = 0.0
    for k, t in enumerate(grid.times):
        bcoef = drift.coeffs(t, pts) if (drift is not None and not drift.is_zero) else None
        acc = np.zeros(int(interior.sum()))
        for c in range(U.shape[-1]):
            Zu, Lu = pi.operators(U[k, :, c])
            r = Ut[k, :, c] + sgn * (sol.kappa * Lu - sol.lam * U[k, :, c])
            if bcoef is not None:
                r = r + np.sum(bcoef * Zu, axis=1)
            r = r - F[k, :, c]
            acc += r[interior] ** 2
        total += wt[k] * np.sum(acc * wx)
    return float(math.sqrt(total))


# ---------------------------------------------------------------------------
# diagnostics


def grad_sup(u: GridField) -> float:
    """Grid maximum of the spectral norm of the Euclidean Jacobian of u."""
    vec = u if u.is_vector else u.with_values(u.values[..., None])
    best = 0.0
    for k in range(vec.values.shape[0]):
        slab = GridField(vec.grid.with_time(vec.grid.dt, 1), np.stack([vec.values[k]] * 2))
        J = euclidean_gradient(slab)[0].reshape(-1, vec.ncomp, vec.grid.group.N)
        fro = np.sqrt(np.sum(J * J, axis=(1, 2)))
        # Frobenius bounds the spectral norm; refine only where it matters
        cand = fro > best
        if np.any(cand):
            s = np.linalg.norm(J[cand], ord=2, axis=(1, 2))
            best = max(best, float(np.max(s)))
    return best


def horizontal_sups(u: GridField, depth: int, order: int = 2) -> dict:
    """Grid sup of |Z_I u| (max over components) for every word |I| <= depth."""
    grid = u.grid
    st = stencils(grid, order)
    U = _as_stack(u)
    out = {}
    for k in range(U.shape[0]):
        cache = {(): U[k]}
        for word in horizontal_words(grid.group.m, depth):
            if word not in cache:
                cache[word] = st.D[word[0] - 1] @ cache[word[1:]]
            key = "".join(map(str, word)) or "0"
            out[key] = max(out.get(key, 0.0), float(np.max(np.abs(cache[word]))))
    return out


# ---------------------------------------------------------------------------
# public solvers


def solve_heat(g: CarnotGroupSpec, f: GridField, T: float | None = None, kappa: float = 1.0,
               lam: float = 0.0, residual: bool = True, scheme: str = "euler",
               order: int = 2) -> PdeSolution:
    """Solve u_t = kappa L u - lam u + f, u(0) = 0 on f's grid.

    Raises StabilityError when the grid's time step exceeds the explicit
    bound for the chosen stencil order.
    """
    grid = f.grid
    if grid.group.N != g.N or grid.group.m != g.m:
        raise ContractViolation("field grid belongs to a different group")
    if T is not None and not math.isclose(T, grid.T):
        raise ContractViolation(f"horizon {T} differs from the grid horizon {grid.T}")
    _check_dt(grid, kappa, order)
    U = _evolve(grid, kappa, lam, _as_stack(f), scheme=scheme, order=order)
    u = _from_stack(grid, U, f.is_vector)
    sol = PdeSolution(u, float("nan"), 0, lam, float("nan"), kappa, False,
                      {"scheme": scheme, "order": order})
    if residual:
        sol.residual_norm = plugin_residual(sol, f)
    return sol


def _reverse(arr):
    return arr[::-1].copy()


def solve_kolmogorov(g: CarnotGroupSpec, b: DriftSpec, f: GridField, lam: float, T: float | None = None,
                     method: str = "picard", tol: float = 1e-8, max_iter: int = 100,
                     kappa: float = 0.5, residual: bool = True, diagnostics: bool = True,
                     scheme: str = "euler", order: int = 2) -> PdeSolution:
    """Solve u_t + kappa L u + sum b^i Z_i u - lam u = f with u(T) = 0.

    ``method="picard"`` iterates the frozen-drift heat solve until the
    S^{1,(q,p)} distance of successive iterates drops below ``tol``; when
    the distance grows twice the horizon is split into shorter windows,
    solved from the terminal time backwards.  ``method="march"`` evaluates
    the drift term on the current step, which is the Picard fixed point.
    """
    grid = f.grid
    if T is not None and not math.isclose(T, grid.T):
        raise ContractViolation(f"horizon {T} differs from the grid horizon {grid.T}")
    _check_dt(grid, kappa, order)
    Fr = -_reverse(_as_stack(f))
    C = Fr.shape[-1]
    pts = grid.flat_points()
    drift = None
    if not b.is_zero:
        drift = np.stack([b.coeffs(grid.T - s, pts) for s in grid.times])
    info = {"method": method, "scheme": scheme, "order": order, "distances": [], "windows": 1}
    if not np.any(Fr):
        V = np.zeros((grid.n_t + 1, grid.size, C))
        iterations = 0
    elif drift is None or method == "march":
        V = _evolve(grid, kappa, lam, Fr, drift, scheme=scheme, order=order)
        iterations = 1
    elif method == "picard":
        V, iterations, extra = _picard(grid, kappa, lam, Fr, drift, b.q, b.p, tol, max_iter,
                                       scheme, order)
        info.update(extra)
    else:
        raise ValueError(f"unknown method {method!r}")
    u = _from_stack(grid, _reverse(V), f.is_vector)
    sol = PdeSolution(u, float("nan"), iterations, lam, float("nan"), kappa, True, info)
    if diagnostics:
        sol.grad_sup = grad_sup(u)
    if residual:
        sol.residual_norm = plugin_residual(sol, f, b)
    return sol


def _picard(grid, kappa, lam, Fr, drift, q, p, tol, max_iter, scheme, order):
    n_t = grid.n_t
    window = n_t
    while True:
        V = np.zeros((n_t + 1, grid.size, Fr.shape[-1]))
        total_iter = 0
        all_dists = []
        ok = True
        for lo in range(0, n_t, window):
            hi = min(lo + window, n_t)
            start = V[lo]
            prev = np.broadcast_to(start, (hi - lo + 1,) + start.shape).copy()
            dists = []
            increases = 0
            converged = False
            for _ in range(max_iter):
                new = _evolve(grid, kappa, lam, Fr, drift, prev=prev, start=start, lo=lo, hi=hi,
                              scheme=scheme, order=order)
                d = _s1_distance(grid, new - prev, q, p, order)
                dists.append(d)
                prev = new
                total_iter += 1
                if d < tol:
                    converged = True
                    break
                if len(dists) >= 2 and d > dists[-2]:
                    increases += 1
                    if increases >= 2:
                        break
            all_dists.append(dists)
            if not converged:
                ok = False
                break
            V[lo:hi + 1] = prev
        if ok:
            return V, total_iter, {"distances": all_dists, "windows": math.ceil(n_t / window),
                                   "window_steps": window}
        if window == 1:
            raise PicardError("Picard iteration does not contract even on single-step windows; "
                              "enlarge lambda or shrink T")
        window = max(1, window // 2)
        log.info("Picard iteration not contracting; splitting horizon into windows of %d steps", window)


def select_lambda(g: CarnotGroupSpec, b: DriftSpec, f: GridField, eps: float, T: float | None = None,
                  lam0: float = 1.0, lam_max: float = 2.0 ** 20, grad_target: float = 0.5,
                  method: str = "picard", residual: bool = True, **kw) -> tuple:
    """Double lambda from ``lam0`` until every grid sup of Z_I u (|I| <= r)
    is at most ``eps`` and the Euclidean gradient sup is at most ``grad_target``.

    Returns ``(lam, solution)``; the attempt history is stored in
    ``solution.diagnostics["lambda_history"]``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    lam = lam0
    history = []
    while lam <= lam_max:
        sol = solve_kolmogorov(g, b, f, lam, T, method=method, residual=False, **kw)
        sups = horizontal_sups(sol.u, g.r, kw.get("order", 2))
        worst = max(sups.values())
        history.append({"lambda": lam, "max_sup": worst, "grad_sup": sol.grad_sup,
                        "iterations": sol.iterations})
        log.info("lambda=%g: max sup %.4g, grad sup %.4g", lam, worst, sol.grad_sup)
        if worst <= eps and sol.grad_sup <= grad_target:
            if residual:
                sol.residual_norm = plugin_residual(sol, f, b)
            sol.diagnostics["lambda_history"] = history
            sol.diagnostics["sups"] = sups
            return lam, sol
        lam *= 2
    raise LambdaSelectionError(f"no lambda <= {lam_max:g} met the bounds; history: {history}")


def apriori_heat_check(sol: PdeSolution, f: GridField, k: int, q: float, p: float) -> dict:
    """Ratio (||u||_{S^{k+2}} + ||u_t||_{S^k}) / ||f||_{S^k} for a forward solution."""
    fn = sobolev_norm(f, k, q, p, check_margin=False)
    if fn == 0:
        return {"ratio": 0.0, "u_norm": 0.0, "f_norm": 0.0, "k": k, "q": q, "p": p}
    un = (sobolev_norm(sol.u, k + 2, q, p, check_margin=False)
          + sobolev_norm(sol.u.time_derivative(), k, q, p, check_margin=False))
    return {"ratio": un / fn, "u_norm": un, "f_norm": fn, "k": k, "q": q, "p": p,
            "T": f.grid.T, "envelope": max(f.grid.T, 1.0)}
