"""Measured T-scaling of the parabolic Sobolev embedding

    ||u||_{S^{l,(q1,p1)}} <= C T^alpha (||u||_{S^{k+2,(q,p)}} + ||u_t||_{S^{k,(q,p)}}),

alpha = ((k + 2 - l + 2/q1 + Q/p1) - (2/q + Q/p)) / 2, for u(0) = 0.
"""
from __future__ import annotations

import math

import numpy as np

from .fields import DomainError, GridField, bump, make_grid, sobolev_norm
from .groups import CarnotGroupSpec
from .heat import fit_slope
from .kolmogorov import solve_heat

__all__ = ["embedding_exponent", "embedding_scaling_test", "heat_family"]


def _inv(x):
    return 0.0 if math.isinf(x) else 1.0 / x


def embedding_exponent(Q: int, k: int, l: int, q: float, p: float, q1: float, p1: float) -> float:
    """alpha for the given exponents; DomainError when they are not admissible."""
    if l not in (k, k + 1):
        raise DomainError("l must be k or k + 1")
    if not (1 <= p <= p1 <= math.inf and 1 <= q <= q1 <= math.inf):
        raise DomainError("need 1 <= p <= p1 <= inf and 1 <= q <= q1 <= inf")
    lhs = 2 * _inv(q) + Q * _inv(p)
    rhs = (k + 2 - l) + 2 * _inv(q1) + Q * _inv(p1)
    if not lhs < rhs:
        raise DomainError(f"2/q + Q/p = {lhs:.4g} must be below {rhs:.4g}")
    return 0.5 * (rhs - lhs)


def embedding_scaling_test(u_family, k: int, l: int, q: float, p: float, q1: float, p1: float,
                           tol: float = 0.15, order: int = 2) -> dict:
    """Norm ratios LHS / RHS over a family of solutions on horizons T_j and the
    fitted log-log slope in T, compared with alpha + tol."""
    u_family = list(u_family)
    g = u_family[0].grid.group
    alpha = embedding_exponent(g.Q, k, l, q, p, q1, p1)
    Ts, lhs, rhs, ratios = [], [], [], []
    for u in u_family:
        if not np.allclose(u.values[0], 0.0):
            raise DomainError("u(0, .) must vanish")
        L = sobolev_norm(u, l, q1, p1, check_margin=False, order=order)
        R = (sobolev_norm(u, k + 2, q, p, check_margin=False, order=order)
             + sobolev_norm(u.time_derivative(), k, q, p, check_margin=False, order=order))
        Ts.append(u.grid.T)
        lhs.append(L)
        rhs.append(R)
        ratios.append(0.0 if R == 0 else L / R)
    if all(r == 0 for r in ratios):
        slope = -math.inf
    else:
        slope = fit_slope(Ts, ratios)
    return {"alpha": alpha, "T": Ts, "lhs": lhs, "rhs": rhs, "ratios": ratios, "slope": slope,
            "tol": tol, "passed": bool(slope <= alpha + tol)}


def heat_family(g: CarnotGroupSpec, Ts, radius: float, h: float, bounds=None, spacing=None,
                bump_radius: float = 1.0, order: int = 2, scheme: str = "euler") -> list:
    """Solutions of u_t = L u + f, u(0) = 0, for a fixed time-independent bump
    f(x) = bump(|x| / bump_radius) on each horizon in Ts (same spatial grid).
    The radius is Euclidean so that f is smooth."""
    out = []
    for T in Ts:
        grid = make_grid(g, T, radius, h, bounds=bounds, spacing=spacing, order=order)
        f = GridField.from_function(grid, lambda t, x: bump(np.linalg.norm(x, axis=-1) / bump_radius))
        out.append(solve_heat(g, f, residual=False, scheme=scheme, order=order).u)
    return out
