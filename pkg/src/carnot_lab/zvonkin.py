"""The map Phi(t, x) = x + u(t, x), its inverse, the conjugated SDE, and the
pathwise experiments built on them.

``u`` solves the vector Kolmogorov equation with right-hand side ``-b``
written as a Euclidean vector, so that ``Y = Phi(t, X)`` solves the Ito SDE

    dY = [lam u + (1/2) sum_i Z_i' Z_i](t, Phi^{-1} Y) dt
         + sum_i (Z_i + Z_i u)(t, Phi^{-1} Y) dB^i.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .drift import DriftSpec
from .fields import (
    ContractViolation,
    DomainError,
    GridField,
    SpaceTimeGrid,
    euclidean_gradient,
    horizontal_derivative,
    make_grid,
)
from .groups import CarnotGroupSpec, horizontal_field_matrix
from .heat import fit_slope
from .kolmogorov import PdeSolution, select_lambda, solve_kolmogorov
from .sde import Ball, BrownianDriver, integrate, sample_driver, stratonovich_correction

log = logging.getLogger(__name__)

__all__ = [
    "CertificationError",
    "OutOfDomainError",
    "ZvonkinMap",
    "build_map",
    "map_from_solution",
    "certify",
    "invert",
    "conjugated_coeffs",
    "lipschitz_probe",
    "conjugation_consistency",
    "uniqueness_experiment",
]

GRAD_TOL = 0.05


class CertificationError(RuntimeError):
    """The gradient bounds could not be certified on any admissible ball."""


class OutOfDomainError(DomainError):
    """A fixed-point iterate left the admissible region."""


@dataclass
class ZvonkinMap:
    group: CarnotGroupSpec
    solution: PdeSolution
    lam: float
    omega: Ball
    grad_bounds: dict
    zu: list = field(repr=False)  # Z_i u as cubic vector fields
    order: int = 2

    @property
    def u(self) -> GridField:
        return self.solution.u

    @property
    def grid(self) -> SpaceTimeGrid:
        return self.solution.u.grid

    def phi(self, t, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x + self.u(t, x)

    def in_box(self, x, margin: float = 0.0) -> np.ndarray:
        return self.grid.contains(x, margin)

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "omega_center": list(self.omega.center),
                "omega_radius": self.omega.radius, "grad_bounds": self.grad_bounds,
                "residual": self.solution.residual_norm, "grad_sup": self.solution.grad_sup}


# ---------------------------------------------------------------------------
# construction


def _box_radius(grid: SpaceTimeGrid, center) -> float:
    b = np.asarray(grid.bounds) - np.abs(np.asarray(center)) - 3 * grid.spacing
    return float(np.min(b))


def certify(zmap_or_sol, omega: Ball, tol: float = GRAD_TOL) -> dict:
    """Grid extremes of ||grad Phi|| and ||grad Phi^{-1}|| over nodes in omega.

    Spectral norms of I + grad u and of its inverse, over all grid times;
    also the smallest ratio |Phi(x) - Phi(y)| / |x - y| over node pairs at
    every grid time (an injectivity witness).
    """
    sol = zmap_or_sol.solution if isinstance(zmap_or_sol, ZvonkinMap) else zmap_or_sol
    u = sol.u
    grid = u.grid
    N = grid.group.N
    pts = grid.flat_points()
    inside = omega.contains(pts)
    if not np.any(inside):
        raise ContractViolation("omega contains no grid nodes")
    J = euclidean_gradient(u).reshape(grid.n_t + 1, grid.size, N, N)[:, inside]
    M = np.eye(N) + J
    sv = np.linalg.svd(M, compute_uv=False)
    fwd = sv[..., 0]
    inv = 1.0 / sv[..., -1]
    rng = np.random.default_rng(0)
    P = int(inside.sum())
    a = rng.integers(0, P, 2000)
    c = rng.integers(0, P, 2000)
    keep = a != c
    X = pts[inside]
    U = u.values.reshape(grid.n_t + 1, grid.size, N)[:, inside]
    dx = np.linalg.norm(X[a[keep]] - X[c[keep]], axis=-1)
    dphi = np.linalg.norm((X[a[keep]] + U[:, a[keep]]) - (X[c[keep]] + U[:, c[keep]]), axis=-1)
    inj = float(np.min(dphi / dx)) if np.any(keep) else 1.0
    out = {"grad_phi_max": float(fwd.max()), "grad_phi_min": float(fwd.min()),
           "grad_inv_max": float(inv.max()), "grad_inv_min": float(inv.min()),
           "injectivity_ratio": inj, "tol": tol}
    lo, hi = 0.5 - tol, 2.0 + tol
    out["certified"] = bool(lo <= out["grad_phi_min"] and out["grad_phi_max"] <= hi
                            and lo <= out["grad_inv_min"] and out["grad_inv_max"] <= hi and inj > 0)
    return out


def map_from_solution(g: CarnotGroupSpec, sol: PdeSolution, x0=None, radius: float | None = None,
                      min_radius: float = 0.05, order: int | None = None) -> ZvonkinMap:
    """Wrap a solved vector field u into a ZvonkinMap, halving the ball radius
    around x0 until the gradient certificates hold."""
    grid = sol.u.grid
    x0 = np.zeros(g.N) if x0 is None else np.asarray(x0, dtype=float)
    order = order or sol.diagnostics.get("order", 2)
    cubic = GridField(grid, sol.u.values, "cubic")
    sol = PdeSolution(cubic, sol.residual_norm, sol.iterations, sol.lam, sol.grad_sup, sol.kappa,
                      sol.backward, sol.diagnostics)
    r = _box_radius(grid, x0) if radius is None else float(radius)
    if r <= 0:
        raise ContractViolation("x0 is too close to the edge of the grid box")
    while True:
        omega = Ball(tuple(map(float, x0)), r)
        bounds = certify(sol, omega)
        if bounds["certified"]:
            break
        log.info("gradient certificate failed on radius %.4g; halving", r)
        r /= 2
        if r < min_radius:
            raise CertificationError(f"no certified ball of radius >= {min_radius}; last bounds {bounds}")
    zu = [GridField(grid, horizontal_derivative(sol.u, i + 1, order=order).values, "cubic")
          for i in range(g.m)]
    return ZvonkinMap(g, sol, sol.lam, omega, bounds, zu, order)


def build_map(g: CarnotGroupSpec, b: DriftSpec, T: float, eps: float, grid: SpaceTimeGrid | None = None,
              x0=None, h: float | None = None, radius: float | None = None, lam: float | None = None,
              order: int = 4, scheme: str = "heun", method: str = "march", **kw) -> ZvonkinMap:
    """Solve the vector equation with f = -b (Euclidean vector), pick lambda by
    doubling unless ``lam`` is given, and certify the gradient bounds."""
    if grid is None:
        grid = b.default_grid(h, T)
        grid = make_grid(g, T, b.support_radius, float(grid.spacing[0]), bounds=grid.bounds,
                         spacing=grid.spacing, kappa=0.5, order=order)
    f = GridField.from_function(grid, lambda t, x: -b.euclidean(t, x))
    if b.is_zero:
        sol = solve_kolmogorov(g, b, f, 0.0 if lam is None else lam, method=method, scheme=scheme,
                               order=order, **kw)
        zu = [GridField(grid, np.zeros(f.values.shape), "cubic") for _ in range(g.m)]
        sol.u = GridField(grid, sol.u.values, "cubic")
        bounds = {"grad_phi_max": 1.0, "grad_phi_min": 1.0, "grad_inv_max": 1.0, "grad_inv_min": 1.0,
                  "injectivity_ratio": 1.0, "tol": GRAD_TOL, "certified": True}
        return ZvonkinMap(g, sol, sol.lam, Ball.everywhere(g.N), bounds, zu, order)
    if lam is None:
        lam, sol = select_lambda(g, b, f, eps, method=method, scheme=scheme, order=order, **kw)
    else:
        sol = solve_kolmogorov(g, b, f, lam, method=method, scheme=scheme, order=order, **kw)
    return map_from_solution(g, sol, x0, radius, order=order)


# ---------------------------------------------------------------------------
# evaluation


def invert(zmap: ZvonkinMap, t, y, tol: float = 1e-10, max_iter: int = 60, domain: str = "omega",
           x_init=None, return_iterations: bool = False):
    """Solve Phi(t, x) = y by x_{k+1} = y - u(t, x_k).

    Raises OutOfDomainError when an iterate leaves omega (``domain="omega"``)
    or the grid box (``domain="box"``).
    """
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    ys = np.atleast_2d(y)
    x = ys.copy() if x_init is None else np.array(np.atleast_2d(x_init), dtype=float)
    t = np.broadcast_to(np.asarray(t, dtype=float), ys.shape[:-1])
    it = 0
    active = np.ones(len(ys), dtype=bool)
    for it in range(1, max_iter + 1):
        xa = ys[active] - zmap.u(t[active], x[active])
        x[active] = xa
        ok = zmap.omega.contains(xa) if domain == "omega" else zmap.in_box(xa)
        if not np.all(ok):
            raise OutOfDomainError(f"fixed-point iterate left the {domain} at iteration {it}")
        resid = np.linalg.norm(zmap.phi(t[active], xa) - ys[active], axis=-1)
        done = resid < tol
        idx = np.nonzero(active)[0]
        active[idx[done]] = False
        if not np.any(active):
            break
    out = x[0] if single else x
    return (out, it) if return_iterations else out


def conjugated_coeffs(zmap: ZvonkinMap, t, y, x=None, domain: str = "omega"):
    """(b~, sigma~) at y: shapes (P, N) and (P, N, m).

    ``x`` may carry the already-inverted points Phi^{-1}(t, y).
    """
    g = zmap.group
    if x is None:
        x = invert(zmap, t, y, domain=domain)
    x = np.atleast_2d(x)
    btil = zmap.lam * zmap.u(t, x) + stratonovich_correction(g, x)
    A = horizontal_field_matrix(g, x)
    zu = np.stack([Z(t, x) for Z in zmap.zu], axis=-1)
    return btil, A + zu


def lipschitz_probe(zmap: ZvonkinMap, n_pairs: int = 200, seed: int = 0, times=None,
                    scale: float = 0.1) -> dict:
    """Largest |b~(t, Phi x) - b~(t, Phi x')| / |Phi x - Phi x'| over random pairs
    in omega at the given grid times; repeated with 4x the pairs."""
    g = zmap.group
    grid = zmap.grid
    times = grid.times if times is None else np.asarray(times)
    radius = zmap.omega.radius
    if math.isinf(radius):
        radius = float(np.min(np.asarray(grid.bounds) - 3 * grid.spacing))
    center = np.asarray(zmap.omega.center)

    def estimate(n, stream_id):
        rng = np.random.default_rng([seed, stream_id])
        best = 0.0
        for t in times:
            d = rng.normal(size=(n, g.N))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            x = center + d * radius * rng.uniform(0, 1, (n, 1)) ** (1 / g.N) * 0.98
            step = rng.normal(size=(n, g.N))
            step *= scale * radius * rng.uniform(0.05, 1, (n, 1)) / np.linalg.norm(step, axis=1, keepdims=True)
            xp = x + step
            ok = zmap.omega.contains(xp)
            x, xp = x[ok], xp[ok]
            bt = zmap.lam * zmap.u(t, x) + stratonovich_correction(g, x)
            bp = zmap.lam * zmap.u(t, xp) + stratonovich_correction(g, xp)
            dy = np.linalg.norm(zmap.phi(t, x) - zmap.phi(t, xp), axis=-1)
            best = max(best, float(np.max(np.linalg.norm(bt - bp, axis=-1) / dy)))
        return best

    base = estimate(n_pairs, 0)
    more = estimate(4 * n_pairs, 1)
    growth = (more - base) / base if base > 0 else 0.0
    return {"estimate": base, "estimate_4x": more, "growth": growth, "n_pairs": n_pairs,
            "finite": bool(np.isfinite(base) and np.isfinite(more)),
            "stable": bool(np.isfinite(more) and growth < 0.25)}


# ---------------------------------------------------------------------------
# experiments


def _sup_dist(a, b, stop):
    """E over paths of max_{n <= stop} |a_n - b_n| for path arrays (n+1, P, N)."""
    d = np.linalg.norm(a - b, axis=-1)
    n = np.arange(d.shape[0])[:, None]
    d = np.where(n <= stop[None, :], d, 0.0)
    return d.max(axis=0)


def conjugation_consistency(zmap: ZvonkinMap, b: DriftSpec, x0, driver: BrownianDriver,
                            factors=(4, 2, 1), slope_floor: float = 0.4) -> dict:
    """Integrate X (lie_exp) and Y (Ito Euler-Maruyama for the conjugated SDE)
    on the same Brownian paths at several step sizes and report
    E[sup_{t <= tau} |Phi(t, X_t) - Y_t|]."""
    g = zmap.group
    x0 = np.asarray(x0, dtype=float)
    if not zmap.omega.contains(x0):
        raise ContractViolation("x0 must lie in omega")
    dts, defects = [], []
    for k in factors:
        drv = driver.coarsen(k)
        X = integrate(g, b, x0, drv, zmap.omega, "lie_exp")
        y0 = zmap.phi(0.0, x0)
        Y = _integrate_conjugated(g, zmap, y0, drv, X.exit_index)
        phiX = np.stack([zmap.phi(t, X.paths[n]) for n, t in enumerate(X.times)])
        defects.append(float(_sup_dist(phiX, Y, X.exit_index).mean()))
        dts.append(drv.dt)
    slope = fit_slope(dts, defects)
    diam = zmap.omega.diameter if math.isfinite(zmap.omega.radius) else float(
        2 * np.min(zmap.grid.bounds))
    return {"dt": dts, "defects": defects, "slope": slope, "slope_floor": slope_floor,
            "diam_omega": diam, "n_paths": driver.n_paths,
            "passed": bool(slope >= slope_floor or all(d == 0 for d in defects)),
            "heuristic_rate": True}


def _integrate_conjugated(g, zmap, y0, drv, stop_index):
    """Euler-Maruyama for Y with preimages tracked by warm-started inversion."""
    P = drv.n_paths
    times = drv.times
    dt = drv.dt
    y = np.broadcast_to(y0, (P, g.N)).copy()
    x = invert(zmap, np.zeros(P), y, domain="box")
    out = np.empty((drv.n_steps + 1, P, g.N))
    out[0] = y
    for n in range(drv.n_steps):
        live = stop_index > n
        if np.any(live):
            t = times[n]
            bt, sig = conjugated_coeffs(zmap, t, y[live], x=x[live])
            y[live] = y[live] + bt * dt + np.einsum("pnm,pm->pn", sig, drv.increments[n, live])
            tn = np.full(int(live.sum()), times[n + 1])
            x[live] = invert(zmap, tn, y[live], domain="box", x_init=x[live])
        out[n + 1] = y
    return out


def uniqueness_experiment(g: CarnotGroupSpec, b: DriftSpec, x0, n_paths: int, omega: Ball, T: float,
                          steps=(32, 64, 128), seed: int = 0, schemes=("lie_exp", "euler_heun"),
                          rel_tol: float = 1e-2, control_floor: float = 0.1) -> dict:
    """Two solutions per Brownian path (different schemes), stopped on leaving
    omega, at increasing resolution; plus a negative control with
    independent drivers at the finest resolution."""
    x0 = np.asarray(x0, dtype=float)
    finest = max(steps)
    base = sample_driver(g.m, T, finest, seed, 0, n_paths)
    levels = []
    for n in sorted(steps):
        drv = base.coarsen(finest // n)
        X1 = integrate(g, b, x0, drv, omega, schemes[0])
        X2 = integrate(g, b, x0, drv, omega, schemes[1])
        stop = np.maximum(X1.exit_index, X2.exit_index)
        levels.append({"n_steps": n, "dt": drv.dt,
                       "defect": float(_sup_dist(X1.paths, X2.paths, stop).mean())})
    other = sample_driver(g.m, T, finest, seed, 1, n_paths)
    C1 = integrate(g, b, x0, base, omega, schemes[0])
    C2 = integrate(g, b, x0, other, omega, schemes[0])
    stop = np.maximum(C1.exit_index, C2.exit_index)
    control = float(_sup_dist(C1.paths, C2.paths, stop).mean())
    defects = [lv["defect"] for lv in levels]
    diam = omega.diameter
    decreasing = all(a > c for a, c in zip(defects, defects[1:]))
    ok = decreasing and defects[-1] < rel_tol * diam and control > control_floor * diam
    return {"levels": levels, "defects": defects, "slope": fit_slope([lv["dt"] for lv in levels], defects),
            "control": control, "diam_omega": diam, "decreasing": decreasing,
            "finest_ok": bool(defects[-1] < rel_tol * diam),
            "control_ok": bool(control > control_floor * diam),
            "verdict": "pass" if ok else "fail", "schemes": list(schemes), "n_paths": n_paths}
