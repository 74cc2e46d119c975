"""Seeded Brownian drivers and integrators for dX = b dt + sum_i Z_i(X) o dB^i.

Schemes
-------
``lie_exp``     X_{n+1} = X_n o (dB + b(t_n, X_n) dt), the increment read as a
                horizontal element of the algebra (exact for b = 0 up to the
                discrete Levy area).
``euler_heun``  Stratonovich predictor-corrector in Euclidean coordinates.
``ito_em``      Euler-Maruyama for an Ito SDE given by raw Euclidean
                coefficients; used for the conjugated equation, whose drift
                is not horizontal.

Paths are stopped (frozen) at the first grid time they are outside the
region ``omega``.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid

from .drift import DriftSpec
from .fields import ContractViolation, GridField
from .groups import CarnotGroupSpec, field_jacobian, group_law, horizontal_field_matrix
from .rng import BLOCK_SIZE, block_slices, stream, thread_count

__all__ = [
    "IntegrationError",
    "Ball",
    "BrownianDriver",
    "PathEnsemble",
    "sample_driver",
    "integrate",
    "KrylovReport",
    "krylov_check",
    "ito_consistency_check",
    "stratonovich_correction",
    "write_ensemble",
]

STAGE_SDE = 21
SCHEMES = ("lie_exp", "euler_heun", "ito_em")


class IntegrationError(RuntimeError):
    def __init__(self, step, msg="non-finite state"):
        super().__init__(f"{msg} at step {step}")
        self.step = step


@dataclass(frozen=True)
class Ball:
    """Euclidean ball; radius = inf is the whole space."""

    center: tuple
    radius: float

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if math.isinf(self.radius):
            return np.ones(x.shape[:-1], dtype=bool)
        return np.linalg.norm(x - np.asarray(self.center), axis=-1) < self.radius

    @property
    def diameter(self) -> float:
        return 2.0 * self.radius

    @classmethod
    def everywhere(cls, N: int) -> "Ball":
        return cls(tuple([0.0] * N), math.inf)


@dataclass
class BrownianDriver:
    """Brownian increments for n_paths paths: shape (n_steps, n_paths, m)."""

    m: int
    T: float
    n_steps: int
    seed: int
    stream_id: int
    increments: np.ndarray = field(repr=False)

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def n_paths(self) -> int:
        return self.increments.shape[1]

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)

    def coarsen(self, factor: int) -> "BrownianDriver":
        """The same Brownian paths sampled on a grid ``factor`` times coarser."""
        factor = int(factor)
        if factor < 1 or self.n_steps % factor:
            raise ValueError(f"cannot coarsen {self.n_steps} steps by {factor}")
        inc = self.increments.reshape(self.n_steps // factor, factor, self.n_paths, self.m).sum(axis=1)
        return BrownianDriver(self.m, self.T, self.n_steps // factor, self.seed, self.stream_id, inc)

    def subset(self, paths) -> "BrownianDriver":
        return BrownianDriver(self.m, self.T, self.n_steps, self.seed, self.stream_id,
                              self.increments[:, paths])


def sample_driver(m: int, T: float, n_steps: int, seed: int, stream_id: int = 0,
                  n_paths: int = 1) -> BrownianDriver:
    """Increments ~ N(0, dt), path block b drawn from stream (seed, stream_id, b)."""
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    dt = T / n_steps
    parts = []
    for b, sl in block_slices(int(n_paths), BLOCK_SIZE):
        rng = stream(seed, STAGE_SDE, stream_id, b)
        parts.append(rng.standard_normal((n_steps, sl.stop - sl.start, m)))
    inc = np.concatenate(parts, axis=1) * math.sqrt(dt)
    return BrownianDriver(m, float(T), int(n_steps), int(seed), int(stream_id), inc)


@dataclass
class PathEnsemble:
    times: np.ndarray
    paths: np.ndarray  # (n_steps + 1, n_paths, N)
    exit_index: np.ndarray  # first grid index outside omega, n_steps if none
    exited: np.ndarray
    scheme: str
    driver_seed: int
    stream_id: int
    omega: Ball

    @property
    def n_paths(self) -> int:
        return self.paths.shape[1]

    @property
    def exit_times(self) -> np.ndarray:
        return self.times[self.exit_index]

    def alive(self) -> np.ndarray:
        """(n_steps + 1, n_paths) mask of grid times strictly before the exit index."""
        n = np.arange(len(self.times))[:, None]
        return n < self.exit_index[None, :]

    def subset(self, paths) -> "PathEnsemble":
        return PathEnsemble(self.times, self.paths[:, paths], self.exit_index[paths],
                            self.exited[paths], self.scheme, self.driver_seed, self.stream_id,
                            self.omega)


def stratonovich_correction(g: CarnotGroupSpec, x) -> np.ndarray:
    """(1/2) sum_i Z_i' Z_i at x; shape (..., N)."""
    A = horizontal_field_matrix(g, x)
    out = np.zeros(np.shape(x))
    for i in range(g.m):
        out = out + np.einsum("...nl,...l->...n", field_jacobian(g, x, i), A[..., i])
    return 0.5 * out


def _drift_coeffs(b, t, x, m):
    if b is None or getattr(b, "is_zero", False):
        return None
    return b.coeffs(t, x)


def _step_lie(g, b, t, x, dB, dt):
    v = np.zeros_like(x)
    v[:, :g.m] = dB
    c = _drift_coeffs(b, t, x, g.m)
    if c is not None:
        v[:, :g.m] += c * dt
    return group_law(g, x, v)


def _euclid_drift(g, b, t, x):
    if b is None or getattr(b, "is_zero", False):
        return 0.0
    return b.euclidean(t, x)


def _step_heun(g, b, t, x, dB, dt):
    a0 = _euclid_drift(g, b, t, x)
    s0 = horizontal_field_matrix(g, x) @ dB[..., None]
    pred = x + a0 * dt + s0[..., 0]
    a1 = _euclid_drift(g, b, t + dt, pred)
    s1 = horizontal_field_matrix(g, pred) @ dB[..., None]
    return x + 0.5 * (a0 + a1) * dt + 0.5 * (s0 + s1)[..., 0]


def _step_em(coeffs, t, x, dB, dt):
    drift, sigma = coeffs(t, x)
    return x + drift * dt + np.einsum("pnm,pm->pn", sigma, dB)


def _run_chunk(g, b, x0, inc, times, omega, scheme, coeffs, stop_index):
    n_steps, P, _ = inc.shape
    dt = times[1] - times[0]
    out = np.empty((n_steps + 1, P, g.N))
    x = np.array(np.broadcast_to(x0, (P, g.N)), dtype=float)
    out[0] = x
    exit_index = np.full(P, n_steps, dtype=int)
    exited = np.zeros(P, dtype=bool)
    frozen = ~omega.contains(x)
    exit_index[frozen] = 0
    exited[frozen] = True
    if stop_index is not None:
        frozen |= stop_index <= 0
    for n in range(n_steps):
        live = ~frozen
        if np.any(live):
            xl = x[live]
            dB = inc[n, live]
            if scheme == "lie_exp":
                new = _step_lie(g, b, times[n], xl, dB, dt)
            elif scheme == "euler_heun":
                new = _step_heun(g, b, times[n], xl, dB, dt)
            else:
                new = _step_em(coeffs, times[n], xl, dB, dt)
            if not np.all(np.isfinite(new)):
                raise IntegrationError(n + 1)
            x[live] = new
        out[n + 1] = x
        if stop_index is not None:
            stop = ~frozen & (stop_index <= n + 1)
            frozen |= stop
        leave = ~frozen & ~omega.contains(x)
        exit_index[leave] = n + 1
        exited[leave] = True
        frozen |= leave
    if stop_index is not None:
        exit_index = np.minimum(exit_index, stop_index)
    return out, exit_index, exited


def integrate(g: CarnotGroupSpec, b: DriftSpec | None, x0, driver: BrownianDriver,
              omega: Ball | None = None, scheme: str = "lie_exp", coeffs=None,
              stop_index=None, threads: int | None = None) -> PathEnsemble:
    """Integrate every driver path from x0 (a point or one point per path).

    ``coeffs(t, x) -> (drift (P, N), sigma (P, N, m))`` is required for
    ``scheme="ito_em"`` and ignored otherwise.  ``stop_index`` optionally
    freezes path j after grid index stop_index[j] (a stopping time inherited
    from another ensemble).
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")
    if driver.m != g.m:
        raise ContractViolation(f"driver has {driver.m} components, group needs {g.m}")
    if scheme == "ito_em" and coeffs is None:
        raise ContractViolation("ito_em needs raw coefficients")
    omega = omega or Ball.everywhere(g.N)
    x0 = np.asarray(x0, dtype=float)
    if x0.shape[-1] != g.N:
        raise ContractViolation(f"x0 must have {g.N} coordinates")
    P = driver.n_paths
    x0s = np.broadcast_to(x0, (P, g.N))
    if not np.all(omega.contains(x0s)):
        raise ContractViolation("x0 must lie in omega")
    times = driver.times
    stop = None if stop_index is None else np.asarray(stop_index, dtype=int)
    threads = thread_count(1) if threads is None else max(1, int(threads))
    blocks = [sl for _, sl in block_slices(P, BLOCK_SIZE)]
    per = math.ceil(len(blocks) / threads)
    chunks = [slice(blocks[a].start, blocks[min(a + per, len(blocks)) - 1].stop)
              for a in range(0, len(blocks), per)]

    def work(sl):
        return _run_chunk(g, b, x0s[sl], driver.increments[:, sl], times, omega, scheme, coeffs,
                          None if stop is None else stop[sl])

    if len(chunks) > 1:
        with ThreadPoolExecutor(len(chunks)) as ex:
            parts = list(ex.map(work, chunks))
    else:
        parts = [work(chunks[0])]
    paths = np.concatenate([p[0] for p in parts], axis=1)
    exit_index = np.concatenate([p[1] for p in parts])
    exited = np.concatenate([p[2] for p in parts])
    return PathEnsemble(times, paths, exit_index, exited, scheme, driver.seed, driver.stream_id, omega)


# ---------------------------------------------------------------------------
# Krylov estimate


@dataclass
class KrylovReport:
    pairs: list
    estimates: np.ndarray
    rhs: np.ndarray
    ratios: np.ndarray
    max_ratio: float
    max_ratio_half: float
    exponent: float
    tol: float = 0.25

    @property
    def drift(self) -> float:
        if self.max_ratio_half == 0:
            return 0.0 if self.max_ratio == 0 else math.inf
        return abs(self.max_ratio - self.max_ratio_half) / self.max_ratio_half

    @property
    def passed(self) -> bool:
        return bool(np.all(np.isfinite(self.ratios)) and self.drift < self.tol)

    def to_dict(self) -> dict:
        return {"pairs": [list(map(float, p)) for p in self.pairs],
                "estimates": self.estimates.tolist(), "rhs": self.rhs.tolist(),
                "ratios": self.ratios.tolist(), "max_ratio": self.max_ratio,
                "max_ratio_half": self.max_ratio_half, "drift": self.drift,
                "exponent": self.exponent, "passed": self.passed}


def _occupation(ensemble, f):
    """Per-path left-point integrands f(t_n, X_n) * dt, zero after exit: (n_steps, P)."""
    times = ensemble.times
    dt = times[1] - times[0]
    alive = ensemble.alive()[:-1]
    vals = np.empty(alive.shape)
    for n in range(len(times) - 1):
        vals[n] = f(times[n], ensemble.paths[n])
    if np.any(vals < 0):
        raise ContractViolation("Krylov check needs a non-negative f")
    return vals * dt * alive


def _norm_on(f: GridField, q: float, p: float, t: float) -> float:
    """||f||_{L^q([0, t], L^p)} using the trapezoid rule on a refined time axis."""
    grid = f.grid
    vals = f.values.reshape(grid.n_t + 1, -1)
    w = grid.quadrature_weights().reshape(-1)
    if math.isinf(p):
        sn = np.max(np.abs(vals), axis=1)
    else:
        sn = (np.abs(vals) ** p @ w) ** (1.0 / p)
    ts = np.linspace(0.0, t, 401)
    s = np.interp(ts, grid.times, sn)
    if math.isinf(q):
        return float(np.max(s))
    return float(trapezoid(s ** q, ts) ** (1.0 / q))


def krylov_check(g: CarnotGroupSpec, ensemble: PathEnsemble, f, p: float, q: float, pairs,
                 tol: float = 0.25) -> KrylovReport:
    """Ratio of E int_{s^tau}^{t^tau} f(r, X_r) dr to (t-s)^{1-(2/q+Q/p)} ||f||_{L^{q/2}([0,t], L^{p/2})}.

    ``f`` is a non-negative scalar GridField.  The maximum ratio is computed
    on the first half of the paths and on all of them; the check passes when
    the two differ by less than ``tol`` (relative).
    """
    if ensemble.n_paths == 0:
        raise ContractViolation("empty ensemble")
    occ = _occupation(ensemble, f)
    cum = np.vstack([np.zeros(occ.shape[1]), np.cumsum(occ, axis=0)])
    times = ensemble.times
    expo = 1.0 - (2.0 / q + g.Q / p)
    half = max(1, ensemble.n_paths // 2)
    est, est_half, rhs = [], [], []
    for s, t in pairs:
        i = int(round(s / (times[1] - times[0])))
        j = int(round(t / (times[1] - times[0])))
        per_path = cum[j] - cum[i]
        est.append(float(per_path.mean()))
        est_half.append(float(per_path[:half].mean()))
        rhs.append((t - s) ** expo * _norm_on(f, q / 2, p / 2, t))
    est = np.asarray(est)
    rhs = np.asarray(rhs)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratios = np.where(rhs > 0, est / rhs, 0.0)
        ratios_half = np.where(rhs > 0, np.asarray(est_half) / rhs, 0.0)
    return KrylovReport(list(pairs), est, rhs, ratios, float(np.max(ratios)),
                        float(np.max(ratios_half)), expo, tol)


# ---------------------------------------------------------------------------
# integrated Ito formula


def ito_consistency_check(g: CarnotGroupSpec, b: DriftSpec | None, u: GridField, ensembles,
                          drivers, order: int = 2) -> dict:
    """Defect of the integrated Ito formula for u along each ensemble.

    For each path the defect is
    u(t^tau, X) - u(0, x0) - sum (u_t + b.Zu + L u / 2) dt - sum Z_i u dB^i,
    with operator fields from the grid stencils and left-point sums up to
    the exit index.  Returns the mean and mean absolute defect per level.
    """
    from .fields import horizontal_derivative, sub_laplacian

    grid = u.grid
    for ens in ensembles:
        inside = np.all(np.abs(ens.paths) <= np.asarray(grid.bounds), axis=-1)
        if not np.all(inside):
            raise ContractViolation("u does not cover the ensemble's region")
    Zu = [horizontal_derivative(u, i + 1, order=order) for i in range(g.m)]
    gen = u.time_derivative().values + 0.5 * sub_laplacian(u, order).values
    gen_field = u.with_values(gen)
    levels = []
    for ens, drv in zip(ensembles, drivers):
        times = ens.times
        dt = times[1] - times[0]
        alive = ens.alive()[:-1]
        P = ens.n_paths
        acc = np.zeros(P)
        for n in range(len(times) - 1):
            x = ens.paths[n]
            t = times[n]
            z = np.stack([Z(t, x) for Z in Zu], axis=-1)
            rate = gen_field(t, x)
            if b is not None and not getattr(b, "is_zero", False):
                rate = rate + np.sum(b.coeffs(t, x) * z, axis=-1)
            acc += alive[n] * (rate * dt + np.sum(z * drv.increments[n], axis=-1))
        k_end = ens.exit_index
        end = u(times[k_end], ens.paths[k_end, np.arange(P)])
        defect = end - u(0.0, ens.paths[0]) - acc
        levels.append({"dt": float(dt), "mean_defect": float(abs(defect.mean())),
                       "mean_abs_defect": float(np.abs(defect).mean()),
                       "se": float(defect.std(ddof=1) / math.sqrt(P)) if P > 1 else 0.0})
    return {"levels": levels,
            "decreasing": all(a["mean_abs_defect"] >= b_["mean_abs_defect"]
                              for a, b_ in zip(levels, levels[1:]))}


def write_ensemble(ensemble: PathEnsemble, path) -> None:
    """CSV with columns path_id, t, x_1..x_N, frozen."""
    import csv

    P = ensemble.n_paths
    N = ensemble.paths.shape[-1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path_id", "t"] + [f"x_{j + 1}" for j in range(N)] + ["frozen"])
        for pid in range(P):
            k = ensemble.exit_index[pid]
            for n, t in enumerate(ensemble.times):
                w.writerow([pid, repr(float(t))] + [repr(float(v)) for v in ensemble.paths[n, pid]]
                           + [int(n > k)])
