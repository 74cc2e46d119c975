"""Heat semigroup of the sub-Laplacian and checks of the heat-kernel bounds.

Convention: ``p_t`` is the fundamental solution of ``d/dt - L``.  Horizontal
Brownian motion ``W`` (generator ``L/2``) is simulated by multiplying
Gaussian increments on the right, so ``P_t f(x) = E f(x o W_{2t})`` and the
density of ``W_{2t}`` is ``p_t``.  On abelian groups the endpoint is drawn
directly, and ``method="quadrature"`` uses tensor Gauss-Hermite nodes.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, optimize

from .fields import ContractViolation, DomainError
from .groups import (
    CarnotGroupSpec,
    dilate,
    field_jacobian,
    group_law,
    homogeneous_norm,
    horizontal_field_matrix,
    inverse,
)
from .rng import BLOCK_SIZE, block_slices, stream, thread_count

__all__ = [
    "EstimationError",
    "Estimate",
    "KernelEnvelope",
    "EnvelopeReport",
    "ScalingReport",
    "bm_endpoints",
    "semigroup_apply",
    "kernel_density_estimate",
    "euclidean_kernel",
    "fit_envelope",
    "envelope_check",
    "binned_kernel",
    "kernel_lp_scaling_check",
    "conv_linf_scaling_check",
    "group_convolve",
    "fit_slope",
]

STAGE_HEAT = 11
STEPS_PER_UNIT = 200
MIN_STEPS = 200
DEFAULT_SAMPLES = 100_000


class EstimationError(RuntimeError):
    """A Monte Carlo estimate could not be formed (e.g. non-finite samples)."""


@dataclass
class Estimate:
    value: np.ndarray
    se: np.ndarray
    n: int
    method: str
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# sampling


def _n_steps(t: float, n_steps: int | None) -> int:
    if n_steps is not None:
        return max(1, int(n_steps))
    return max(math.ceil(STEPS_PER_UNIT * t), MIN_STEPS)


def _chunk_endpoints(g, t, sizes, n_steps, seed, key, first):
    """Endpoints for consecutive blocks; block b draws from stream (.., first + b)."""
    rngs = [stream(seed, STAGE_HEAT, *key, first + b) for b in range(len(sizes))]
    n = sum(sizes)
    if g.is_abelian:
        return np.concatenate([r.standard_normal((s, g.N)) for r, s in zip(rngs, sizes)]) * math.sqrt(t)
    sd = math.sqrt(t / n_steps)
    x = np.zeros((n, g.N))
    step = np.zeros((n, g.N))
    for _ in range(n_steps):
        step[:, :g.m] = np.concatenate([r.standard_normal((s, g.m)) for r, s in zip(rngs, sizes)])
        step[:, :g.m] *= sd
        x = group_law(g, x, step)
    return x


def bm_endpoints(g: CarnotGroupSpec, t: float, n: int, seed: int = 0, key=(0,),
                 n_steps: int | None = None, threads: int | None = None) -> np.ndarray:
    """n endpoints of horizontal Brownian motion (generator L/2) at time t.

    Samples are produced in fixed blocks, each from its own counter-based
    stream, so the output does not depend on the thread count.
    """
    if t <= 0:
        raise DomainError("t must be positive")
    key = tuple(int(k) for k in np.atleast_1d(key))
    steps = _n_steps(t, n_steps)
    sizes = [sl.stop - sl.start for _, sl in block_slices(int(n), BLOCK_SIZE)]
    if not sizes:
        return np.zeros((0, g.N))
    threads = thread_count(1) if threads is None else max(1, int(threads))
    per = math.ceil(len(sizes) / threads)
    chunks = [(sizes[a:a + per], a) for a in range(0, len(sizes), per)]

    def work(item):
        return _chunk_endpoints(g, t, item[0], steps, seed, key, item[1])

    if len(chunks) > 1:
        with ThreadPoolExecutor(len(chunks)) as ex:
            parts = list(ex.map(work, chunks))
    else:
        parts = [work(chunks[0])]
    return np.concatenate(parts)


def _hermite_nodes(g: CarnotGroupSpec, t: float, n_nodes: int):
    z, w = np.polynomial.hermite_e.hermegauss(n_nodes)
    w = w / w.sum()
    mesh = np.meshgrid(*([z] * g.N), indexing="ij")
    wmesh = np.meshgrid(*([w] * g.N), indexing="ij")
    nodes = np.stack([m_.ravel() for m_ in mesh], axis=-1) * math.sqrt(2 * t)
    weights = np.prod(np.stack([m_.ravel() for m_ in wmesh], axis=-1), axis=-1)
    return nodes, weights


# ---------------------------------------------------------------------------
# semigroup


def _checked(vals, what):
    vals = np.asarray(vals, dtype=float)
    bad = ~np.isfinite(vals)
    if np.any(bad):
        raise EstimationError(f"{what}: {int(bad.sum())} non-finite samples of f "
                              f"(first at sample {int(np.argmax(bad.reshape(-1)))})")
    return vals


def semigroup_apply(g: CarnotGroupSpec, f, t: float, x, mc_samples: int = DEFAULT_SAMPLES,
                    seed: int = 0, method: str = "auto", n_steps: int | None = None,
                    n_nodes: int = 40, key=(0,)) -> Estimate:
    """Estimate (P_t f)(x) for a vectorised scalar function f of points (..., N).

    ``method`` is "quadrature" (abelian groups only, exact for polynomials of
    degree below 2 * n_nodes), "mc", or "auto" (quadrature when abelian and
    N <= 3).  x may be a single point or a batch (K, N); the same samples are
    reused for all K points.
    """
    if t <= 0:
        raise DomainError("t must be positive")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    if method == "auto":
        method = "quadrature" if (g.is_abelian and g.N <= 3) else "mc"
    if method == "quadrature":
        if not g.is_abelian:
            raise ValueError("quadrature path exists only for abelian groups")
        nodes, w = _hermite_nodes(g, t, n_nodes if g.N == 1 else min(n_nodes, 40 if g.N == 2 else 24))
        vals = np.stack([_checked(f(xi + nodes), "quadrature") for xi in xs])
        value = vals @ w
        se = np.zeros_like(value)
        n = len(w)
    elif method == "mc":
        W = bm_endpoints(g, 2 * t, mc_samples, seed, key, n_steps)
        vals = np.stack([_checked(f(group_law(g, np.broadcast_to(xi, W.shape), W)), "monte carlo")
                         for xi in xs])
        value = vals.mean(axis=1)
        se = vals.std(axis=1, ddof=1) / math.sqrt(len(W))
        n = len(W)
    else:
        raise ValueError(f"unknown method {method!r}")
    if single:
        value, se = value[0], se[0]
    return Estimate(value, se, n, method)


# ---------------------------------------------------------------------------
# kernel density


def euclidean_kernel(t, x) -> np.ndarray:
    """Fundamental solution of d/dt - Laplacian on R^d."""
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    t = np.asarray(t, dtype=float)
    return (4 * math.pi * t) ** (-d / 2) * np.exp(-np.sum(x * x, axis=-1) / (4 * t))


def silverman_bandwidth(samples: np.ndarray) -> np.ndarray:
    n, d = samples.shape
    sd = samples.std(axis=0, ddof=1)
    return sd * (4.0 / ((d + 2) * n)) ** (1.0 / (d + 4))


def kernel_density_estimate(g: CarnotGroupSpec, t: float, x, mc_samples: int = DEFAULT_SAMPLES,
                            bandwidth=None, seed: int = 0, n_steps: int | None = None,
                            key=(0,), samples: np.ndarray | None = None) -> Estimate:
    """Gaussian product-kernel estimate of p(t, x) from endpoints of W_{2t}.

    ``bandwidth`` may be a scalar, a per-coordinate vector, or None for the
    Silverman rule (per coordinate, so it follows the dilation weights).
    """
    if t <= 0:
        raise DomainError("t must be positive")
    W = bm_endpoints(g, 2 * t, mc_samples, seed, key, n_steps) if samples is None else samples
    if bandwidth is None:
        h = silverman_bandwidth(W)
    else:
        h = np.broadcast_to(np.asarray(bandwidth, dtype=float), (g.N,)).copy()
    if np.any(h <= 0):
        raise DomainError("bandwidth must be positive")
    x = np.asarray(x, dtype=float)
    xs = np.atleast_2d(x)
    norm = np.prod(h) * (2 * math.pi) ** (g.N / 2)
    vals = np.empty(len(xs))
    ses = np.empty(len(xs))
    for k, xi in enumerate(xs):
        z = (xi - W) / h
        kv = np.exp(-0.5 * np.sum(z * z, axis=1)) / norm
        vals[k] = kv.mean()
        ses[k] = kv.std(ddof=1) / math.sqrt(len(W))
    if x.ndim == 1:
        return Estimate(vals[0], ses[0], len(W), "kde", {"bandwidth": h})
    return Estimate(vals, ses, len(W), "kde", {"bandwidth": h})


# ---------------------------------------------------------------------------
# envelopes


@dataclass(frozen=True)
class KernelEnvelope:
    C: float
    c: float
    k: int = 0
    I: tuple = ()

    def __post_init__(self):
        if not (self.C > 0 and self.c > 0):
            raise ValueError("envelope constants must be positive")

    def exponent(self, Q: int) -> float:
        return -self.k - (len(self.I) + Q) / 2

    def value(self, g: CarnotGroupSpec, t, x) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        nx = homogeneous_norm(g, x)
        return self.C * t ** self.exponent(g.Q) * np.exp(-self.c * nx ** 2 / t)


@dataclass
class EnvelopeReport:
    envelope: KernelEnvelope
    max_ratio: float
    ratios: np.ndarray
    n_fit: int
    n_eval: int
    slack: float

    @property
    def passed(self) -> bool:
        return bool(self.max_ratio <= 1 + self.slack)

    def to_dict(self) -> dict:
        return {"C": self.envelope.C, "c": self.envelope.c, "k": self.envelope.k,
                "I": list(self.envelope.I), "max_ratio": self.max_ratio, "n_fit": self.n_fit,
                "n_eval": self.n_eval, "slack": self.slack, "passed": self.passed}


def _unpack(g, samples):
    if len(samples) == 0:
        raise ContractViolation("envelope check needs at least one sample")
    t = np.array([s[0] for s in samples], dtype=float)
    x = np.array([np.asarray(s[1], dtype=float) for s in samples])
    est = np.array([float(s[2]) for s in samples])
    se = np.array([float(s[3]) if len(s) > 3 else 0.0 for s in samples])
    if np.any(t <= 0):
        raise DomainError("all sample times must be positive")
    return t, x, est, se


def fit_envelope(g: CarnotGroupSpec, samples, k: int = 0, I=(), margin: float = 2.0) -> KernelEnvelope:
    """Tightest envelope C t^e exp(-c |x|^2/t) lying above every est + margin * se.

    Solved as a linear programme in (log C, c): minimise the total log gap
    subject to no violations.
    """
    t, x, est, se = _unpack(g, samples)
    e = -k - (len(I) + g.Q) / 2
    top = est + margin * se
    keep = top > 0
    if not np.any(keep):
        raise ContractViolation("no positive samples to fit")
    s = homogeneous_norm(g, x[keep]) ** 2 / t[keep]
    y = np.log(top[keep]) - e * np.log(t[keep])
    # log C - c s_j >= y_j;  minimise sum(log C - c s_j - y_j)
    n = len(y)
    res = optimize.linprog(c=[n, -s.sum()], A_ub=np.column_stack([-np.ones(n), s]), b_ub=-y,
                           bounds=[(None, None), (1e-9, None)], method="highs")
    if not res.success:
        raise EstimationError(f"envelope fit failed: {res.message}")
    logC, c = res.x
    return KernelEnvelope(float(math.exp(logC)), float(c), k, tuple(I))


def envelope_check(g: CarnotGroupSpec, samples, env: KernelEnvelope | None = None, k: int = 0,
                   I=(), slack: float = 0.05, holdout: bool = True, seed: int = 0) -> EnvelopeReport:
    """Ratio of |estimate| to a kernel envelope over samples (t, x, est[, se]).

    With ``env=None`` the envelope is fitted on a random half of the samples
    and the ratios are reported on the other half (all samples if there are
    fewer than four).
    """
    t, x, est, se = _unpack(g, samples)
    n = len(t)
    idx = np.arange(n)
    fit_idx = eval_idx = idx
    if env is None:
        if holdout and n >= 4:
            perm = np.random.default_rng(seed).permutation(n)
            fit_idx, eval_idx = np.sort(perm[: n // 2]), np.sort(perm[n // 2:])
        env = fit_envelope(g, [samples[i] for i in fit_idx], k, I)
    ratios = np.abs(est[eval_idx]) / env.value(g, t[eval_idx], x[eval_idx])
    return EnvelopeReport(env, float(np.max(ratios)), ratios, len(fit_idx), len(eval_idx), slack)


# ---------------------------------------------------------------------------
# scaling laws


@dataclass
class ScalingReport:
    slope: float
    expected: float
    times: np.ndarray
    values: np.ndarray
    tol: float
    kind: str
    meta: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        if self.kind == "equality":
            return bool(abs(self.slope - self.expected) <= self.tol)
        return bool(self.slope >= self.expected - self.tol)

    def to_dict(self) -> dict:
        return {"slope": self.slope, "expected": self.expected, "tol": self.tol, "kind": self.kind,
                "times": list(map(float, self.times)), "values": list(map(float, self.values)),
                "passed": self.passed, **self.meta}


def fit_slope(times, values) -> float:
    """Least-squares slope of log(values) against log(times)."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if np.all(values == 0):
        return math.inf
    return float(np.polyfit(np.log(times), np.log(values), 1)[0])


def binned_kernel(g: CarnotGroupSpec, t: float, mc_samples: int = DEFAULT_SAMPLES, seed: int = 0,
                  bins: int = 48, extent: float = 4.0, word=(), n_steps: int | None = None,
                  key=(0,), bandwidth_factor: float = 1.0):
    """Binned kernel estimate of Z_I p_t on a dilation-adapted box.

    The box half-width in coordinate j is ``extent * sd_j`` where ``sd_j``
    is the sample spread; the histogram is smoothed with a Gaussian filter
    of Silverman width and differentiated analytically through the filter.
    Returns (values on the bin centres, axes, cell volume, leaked mass).
    """
    W = bm_endpoints(g, 2 * t, mc_samples, seed, key, n_steps)
    sd = W.std(axis=0, ddof=1)
    half = extent * sd
    edges = [np.linspace(-a, a, bins + 1) for a in half]
    hist, _ = np.histogramdd(W, bins=edges)
    inside = hist.sum()
    leaked = 1.0 - inside / len(W)
    widths = np.array([e[1] - e[0] for e in edges])
    dens = hist / (len(W) * np.prod(widths))
    sigma = bandwidth_factor * silverman_bandwidth(W) / widths
    axes = [0.5 * (e[1:] + e[:-1]) for e in edges]
    word = tuple(word)

    def deriv(orders):
        return ndimage.gaussian_filter(dens, sigma, order=orders, mode="constant") / np.prod(
            widths ** np.asarray(orders))

    if not word:
        return deriv([0] * g.N), axes, float(np.prod(widths)), float(leaked)
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    A = horizontal_field_matrix(g, pts)
    N = g.N
    grad = np.stack([deriv([1 if a == n else 0 for a in range(N)]) for n in range(N)], axis=-1)
    if len(word) == 1:
        out = np.einsum("...n,...n->...", grad, A[..., word[0] - 1])
    elif len(word) == 2:
        i, j = word[0] - 1, word[1] - 1
        H = np.empty(pts.shape[:-1] + (N, N))
        for a in range(N):
            for c in range(a, N):
                o = [0] * N
                o[a] += 1
                o[c] += 1
                H[..., a, c] = H[..., c, a] = deriv(o)
        # Z_i Z_j F = A_i^T H A_j + (Z_j' A_i) . grad F
        corr = np.einsum("...nl,...l->...n", field_jacobian(g, pts, j), A[..., i])
        out = np.einsum("...n,...nk,...k->...", A[..., i], H, A[..., j]) + np.einsum(
            "...n,...n->...", grad, corr)
    else:
        raise ValueError("binned kernel derivatives support words of length <= 2")
    return out, axes, float(np.prod(widths)), float(leaked)


def kernel_lp_scaling_check(g: CarnotGroupSpec, p_exp: float, I=(), k_f: float = 0.0, f=None,
                            times=(0.25, 0.5, 1.0, 2.0), mc_samples: int = DEFAULT_SAMPLES,
                            seed: int = 0, bins: int = 48, tol: float = 0.05,
                            max_leak: float = 0.01) -> ScalingReport:
    """Fit the t-exponent of ||f Z_I p_t||_{L^p} and compare with
    Q/(2p) + (k_f - (Q + |I|))/2.  ``f`` defaults to the constant 1."""
    if not 1 <= p_exp < math.inf:
        raise DomainError("p must lie in [1, inf)")
    vals = []
    leaks = []
    for n, t in enumerate(times):
        dens, axes, vol, leaked = binned_kernel(g, t, mc_samples, seed, bins, word=I, key=(n,))
        if leaked > max_leak:
            raise EstimationError(f"quadrature box leaks {leaked:.3%} of the mass at t={t}")
        leaks.append(leaked)
        if f is not None:
            pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
            dens = f(pts) * dens
        vals.append(float((np.sum(np.abs(dens) ** p_exp) * vol) ** (1.0 / p_exp)))
    expected = g.Q / (2 * p_exp) + (k_f - (g.Q + len(I))) / 2
    return ScalingReport(fit_slope(times, vals), expected, np.asarray(times), np.asarray(vals), tol,
                         "equality", {"leaked_mass": leaks, "p": p_exp, "I": list(I)})


def _translate_word(g, x, word, delta):
    """Points x o (s_1 delta e_i1) o ... with all sign patterns, and their FD weights."""
    pts = [(np.asarray(x, dtype=float), 1.0)]
    for i in word:
        e = np.zeros(g.N)
        e[i - 1] = delta
        nxt = []
        for p_, w in pts:
            nxt.append((group_law(g, p_, e), w / (2 * delta)))
            nxt.append((group_law(g, p_, -e), -w / (2 * delta)))
        pts = nxt
    return pts


def conv_linf_scaling_check(g: CarnotGroupSpec, f, I, p_exp: float, x_points,
                            times=(0.01, 0.02, 0.04), mc_samples: int = 20_000, seed: int = 0,
                            delta: float = 1e-2, tol: float = 0.1, f_norm: float | None = None,
                            method: str = "auto") -> ScalingReport:
    """Fit the t-exponent of sup_x |f * Z_I p_t| = sup_x |Z_I P_t f| and compare
    with the lower bound -(Q/(2p) + 1/2).

    Z_I P_t f is formed by group-translated central differences of step
    ``delta`` applied to one shared set of Brownian endpoints per time.
    ``f=None`` stands for the zero function.
    """
    I = tuple(I)
    if len(I) < 1:
        raise DomainError("need |I| >= 1")
    bound = -(g.Q / (2 * p_exp) + 0.5)
    xs = np.atleast_2d(np.asarray(x_points, dtype=float))
    if f is None:
        z = np.zeros(len(times))
        return ScalingReport(math.inf, bound, np.asarray(times), z, tol, "lower_bound",
                             {"vacuous": True})
    sups = []
    for n, t in enumerate(times):
        stencil = _translate_word(g, xs, I, delta)
        total = np.zeros(len(xs))
        for pts, w in stencil:
            est = semigroup_apply(g, f, t, pts, mc_samples, seed, method=method, key=(n,))
            total += w * np.asarray(est.value)
        sups.append(float(np.max(np.abs(total))))
    meta = {"p": p_exp, "I": list(I)}
    if f_norm is not None:
        meta["f_norm"] = f_norm
    return ScalingReport(fit_slope(times, sups), bound, np.asarray(times), np.asarray(sups), tol,
                         "lower_bound", meta)


def group_convolve(g: CarnotGroupSpec, f, k, x, nodes, weights) -> np.ndarray:
    """(f * k)(x) = int f(x o y^{-1}) k(y) dy by a quadrature rule (nodes, weights) in y."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    kv = k(nodes) * weights
    out = np.empty(len(x))
    for a, xi in enumerate(x):
        out[a] = np.sum(f(group_law(g, np.broadcast_to(xi, nodes.shape), inverse(g, nodes))) * kv)
    return out


def self_similar_pair(g: CarnotGroupSpec, t: float, x):
    """The point D(t^{-1/2}) x at which p(1, .) should match t^{Q/2} p(t, x)."""
    return dilate(g, t ** -0.5, x)
