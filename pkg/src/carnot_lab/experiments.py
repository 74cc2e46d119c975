"""Experiment runners behind ``lab run``.

Each runner takes a validated config and returns ``(report, verdicts, tables)``
where ``tables`` maps a CSV file name to ``(header, rows)``.  :func:`run`
wraps a runner with stage timing, manifest bookkeeping and file output.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, _jsonable, config_hash, load_config, validate
from .drift import DriftSpec
from .embedding import embedding_scaling_test, heat_family
from .fields import GridField
from .groups import dilate
from .heat import (
    bm_endpoints,
    envelope_check,
    euclidean_kernel,
    kernel_density_estimate,
    kernel_lp_scaling_check,
    semigroup_apply,
)
from .kolmogorov import select_lambda, solve_kolmogorov
from .rng import thread_count
from .sde import Ball, integrate, krylov_check, sample_driver, write_ensemble
from .zvonkin import (
    conjugation_consistency,
    invert,
    lipschitz_probe,
    map_from_solution,
    uniqueness_experiment,
)

__all__ = ["run", "RUNNERS", "EXIT_PASS", "EXIT_FAIL", "EXIT_CONFIG", "EXIT_STAGE", "StageFailure"]

log = logging.getLogger(__name__)

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_STAGE = 0, 1, 2, 3


class StageFailure(RuntimeError):
    pass


class _Stages:
    """Stage timer; keeps a record even when a stage raises."""

    def __init__(self):
        self.records = []

    def __call__(self, name, fn, *args, **kw):
        t0 = time.perf_counter()
        try:
            out = fn(*args, **kw)
        except Exception as exc:
            self.records.append({"stage": name, "duration_s": time.perf_counter() - t0,
                                 "status": "failed", "error": f"{type(exc).__name__}: {exc}"})
            raise StageFailure(name) from exc
        self.records.append({"stage": name, "duration_s": time.perf_counter() - t0, "status": "ok"})
        return out


def _xcols(N):
    return [f"x_{j + 1}" for j in range(N)]


def _p(cfg, key, default):
    return cfg.params.get(key, default)


# ---------------------------------------------------------------------------
# runners


def run_heat_checks(cfg: ExperimentConfig, st: _Stages):
    g = cfg.group
    seed = cfg.seed
    n = int(cfg.mc.get("paths", 100_000))
    times = _p(cfg, "times", [0.25, 0.5, 1.0])
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1, 1, (int(_p(cfg, "n_points", 4)), g.N))
    hor = slice(0, g.m)

    # The first layer of x o W is x_h + W_h on any group, so E|.|^2 there is exact.
    def f(y):
        return np.sum(y[..., hor] ** 2, axis=-1)

    def semigroup():
        rows = []
        for i, t in enumerate(times):
            for j, x in enumerate(pts):
                e = semigroup_apply(g, f, t, x, n, seed, method="mc", key=(i, j))
                exact = float(np.sum(x[hor] ** 2) + 2 * t * g.m)
                rows.append([t, *x, e.value, e.se, exact, abs(e.value - exact) / exact])
        return rows

    sg = st("semigroup", semigroup)
    rel_tol = float(_p(cfg, "rel_tol", 0.01))

    def density():
        rows = []
        k = int(_p(cfg, "density_points", 20))
        if g.is_abelian:
            for i in range(k):
                t = rng.uniform(0.2, 1.0)
                x = rng.uniform(-1.5, 1.5, g.N)
                e = kernel_density_estimate(g, t, x, n, seed=seed, key=(1000 + i,))
                ref = float(euclidean_kernel(t, x))
                rows.append([t, *x, e.value, e.se, ref, (e.value - ref) / e.se])
        else:
            # self-similarity p_t(x) = t^{-Q/2} p_1(D(t^{-1/2}) x) against one t=1 sample set
            ref = bm_endpoints(g, 2.0, n, seed, key=(99,), n_steps=256)
            for i in range(k):
                t = float(rng.uniform(0.25, 1.0))
                x = rng.normal(size=g.N) * np.sqrt(t) * 0.8
                W = bm_endpoints(g, 2 * t, n, seed, key=(i,), n_steps=256)
                a = kernel_density_estimate(g, t, x, samples=W)
                b = kernel_density_estimate(g, 1.0, dilate(g, t ** -0.5, x), samples=ref)
                s = t ** (g.Q / 2)
                rows.append([t, *x, a.value * s, a.se * s, b.value,
                             (a.value * s - b.value) / math.hypot(a.se * s, b.se)])
        return rows

    dn = st("density", density)
    z_tol = float(_p(cfg, "z_tol", 3.0))
    verdicts = {"semigroup_rel_error": bool(max(r[-1] for r in sg) < rel_tol),
                "density_within_3se": bool(max(abs(r[-1]) for r in dn) < z_tol)}
    report = {"max_rel_error": max(r[-1] for r in sg), "rel_tol": rel_tol,
              "max_abs_z": max(abs(r[-1]) for r in dn), "z_tol": z_tol,
              "density_reference": "closed form" if g.is_abelian else "dilation of t=1 samples",
              "samples": n}
    tables = {"semigroup.csv": (["t", *_xcols(g.N), "estimate", "se", "exact", "rel_error"], sg),
              "density.csv": (["t", *_xcols(g.N), "estimate", "se", "reference", "z"], dn)}
    return report, verdicts, tables


def run_kernel_scaling(cfg: ExperimentConfig, st: _Stages):
    g = cfg.group
    seed = cfg.seed
    n = int(cfg.mc.get("paths", 100_000))
    times = _p(cfg, "times", [0.25, 0.5, 0.75, 1.5])
    rng = np.random.default_rng(seed)
    per_t = int(_p(cfg, "points_per_time", 5))

    def collapse():
        ref = bm_endpoints(g, 2.0, n, seed, key=(99,), n_steps=256)
        rows, samples = [], []
        for k, t in enumerate(times):
            W = bm_endpoints(g, 2 * t, n, seed, key=(k,), n_steps=256)
            for _ in range(per_t):
                x = rng.normal(size=g.N) * 0.8 * math.sqrt(t)
                a = kernel_density_estimate(g, t, x, samples=W)
                b = kernel_density_estimate(g, 1.0, dilate(g, t ** -0.5, x), samples=ref)
                s = t ** (g.Q / 2)
                rows.append([t, *x, a.value * s, a.se * s, b.value, b.se,
                             (a.value * s - b.value) / math.hypot(a.se * s, b.se)])
            for _ in range(int(_p(cfg, "envelope_points_per_time", 13))):
                x = rng.normal(size=g.N) * 1.5 * math.sqrt(t)
                a = kernel_density_estimate(g, t, x, samples=W)
                samples.append((t, x, a.value, a.se))
        return rows, samples

    rows, samples = st("collapse", collapse)
    env = st("envelope", envelope_check, g, samples, seed=seed)
    lp = st("lp_scaling", kernel_lp_scaling_check, g, 1.0, (), times=tuple(_p(cfg, "lp_times", [0.25, 0.5, 1, 2])),
            mc_samples=n, seed=seed)
    verdicts = {"collapse_within_3se": bool(max(abs(r[-1]) for r in rows) < 3.0),
                "lp_slope": lp.passed, "envelope_ratio": env.passed}
    report = {"collapse_max_abs_z": max(abs(r[-1]) for r in rows), "lp": lp.to_dict(),
              "envelope": env.to_dict(), "samples": n}
    tables = {"collapse.csv": (["t", *_xcols(g.N), "scaled_p_t", "se_t", "p_1", "se_1", "z"], rows),
              "lp_scaling.csv": (["t", "norm"], [[float(a), float(b)] for a, b in zip(lp.times, lp.values)]),
              "envelope.csv": (["index", "ratio"], [[i, float(r)] for i, r in enumerate(env.ratios)])}
    return report, verdicts, tables


def _solver_kw(cfg):
    s = cfg.solver
    return {"method": s.get("method", "march"), "scheme": s.get("scheme", cfg.grid.get("scheme", "heun")),
            "order": int(cfg.grid.get("order", 4))}


def _kolmogorov_solution(cfg: ExperimentConfig, st: _Stages):
    g, b = cfg.group, cfg.drift
    grid = st("grid", cfg.make_grid)
    f = GridField.from_function(grid, lambda t, x: -b.euclidean(t, x))
    kw = _solver_kw(cfg)
    eps = float(cfg.solver.get("eps", 0.5))
    if "lam" in cfg.solver:
        sol = st("solve", solve_kolmogorov, g, b, f, float(cfg.solver["lam"]), **kw)
        lam = sol.lam
    else:
        lam, sol = st("select_lambda", select_lambda, g, b, f, eps, **kw)
    if cfg.solver.get("confirm_picard", False) and kw["method"] != "picard":
        pic = st("picard_confirm", solve_kolmogorov, g, b, f, lam, method="picard", scheme=kw["scheme"],
                 order=kw["order"], residual=False)
        sol.diagnostics["picard_gap"] = float(np.max(np.abs(pic.u.values - sol.u.values)))
        sol.diagnostics["picard_iterations"] = pic.iterations
    return f, lam, sol


def run_kolmogorov(cfg: ExperimentConfig, st: _Stages):
    f, lam, sol = _kolmogorov_solution(cfg, st)
    lam_cap = float(cfg.solver.get("lam_cap", 2 ** 12))
    history = sol.diagnostics.get("lambda_history", [])
    verdicts = {"lambda_cap": bool(lam <= lam_cap), "grad_half": bool(sol.grad_sup <= 0.5),
                "residual": bool(sol.residual_norm is not None and sol.residual_norm < 1e-3)}
    report = {"lambda": lam, "lambda_cap": lam_cap, "grad_sup": sol.grad_sup,
              "residual": sol.residual_norm, "iterations": sol.iterations,
              "sups": {"".join(map(str, k)) if isinstance(k, tuple) else str(k): v
                       for k, v in sol.diagnostics.get("sups", {}).items()},
              "picard_gap": sol.diagnostics.get("picard_gap"), "grid": sol.u.grid.to_dict()}
    return report, verdicts, _lambda_table(history)


def _lambda_table(history):
    rows = [[h["lambda"], h["max_sup"], h["grad_sup"], h["iterations"]] for h in history]
    return {"lambda_history.csv": (["lambda", "max_sup", "grad_sup", "iterations"], rows)}


def run_zvonkin_uniqueness(cfg: ExperimentConfig, st: _Stages):
    g, b = cfg.group, cfg.drift
    f, lam, sol = _kolmogorov_solution(cfg, st)
    x0 = np.asarray(_p(cfg, "x0", [0.0] * g.N), dtype=float)
    zmap = st("certify", map_from_solution, g, sol, x0, _p(cfg, "radius", None), order=_solver_kw(cfg)["order"])
    seed = cfg.seed

    def roundtrip():
        rng = np.random.default_rng(seed)
        r = zmap.omega.radius / math.sqrt(g.N)
        x = x0 + rng.uniform(-r, r, (int(_p(cfg, "roundtrip_points", 100)), g.N))
        return max(float(np.max(np.abs(invert(zmap, t, zmap.phi(t, x)) - x))) for t in zmap.grid.times)

    rt = st("roundtrip", roundtrip)
    lip = st("lipschitz", lipschitz_probe, zmap, int(_p(cfg, "lipschitz_pairs", 200)), seed)
    n_paths = int(cfg.mc.get("paths", 1000))
    steps = sorted(int(s) for s in cfg.mc.get("levels", [32, 64, 128]))
    drv = sample_driver(g.m, cfg.T, steps[-1], seed, 0, n_paths)
    conj = st("conjugation", conjugation_consistency, zmap, b, x0, drv,
              factors=tuple(steps[-1] // s for s in steps))
    uniq = st("uniqueness", uniqueness_experiment, g, b, x0, n_paths, zmap.omega, cfg.T, steps=tuple(steps),
              seed=seed)
    tol = 0.05
    cert = zmap.grad_bounds
    verdicts = {"roundtrip": bool(rt < 1e-8),
                "certificates": bool(cert["grad_phi_min"] >= 0.5 - tol and cert["grad_phi_max"] <= 2 + tol
                                     and cert["grad_inv_min"] >= 0.5 - tol and cert["grad_inv_max"] <= 2 + tol),
                "lipschitz_stable": bool(lip["stable"]), "conjugation_slope": conj["passed"],
                "uniqueness": uniq["verdict"] == "pass"}
    report = {"scenario": cfg.name, "levels": uniq["levels"], "defects": uniq["defects"], "slope": uniq["slope"],
              "verdict": "pass" if all(verdicts.values()) else "fail", "uniqueness": uniq,
              "conjugation": conj, "lipschitz": lip, "roundtrip_error": rt, "map": zmap.to_dict(),
              "lambda": lam, "residual": sol.residual_norm,
              "note": "the order-1/2 slope floor is a heuristic; no rate is claimed by the theory"}
    tables = {"uniqueness_levels.csv": (["n_steps", "dt", "defect"],
                                        [[lv["n_steps"], lv["dt"], lv["defect"]] for lv in uniq["levels"]]),
              "conjugation.csv": (["dt", "defect"], [list(p) for p in zip(conj["dt"], conj["defects"])]),
              **_lambda_table(sol.diagnostics.get("lambda_history", []))}
    return report, verdicts, tables


def krylov_pairs(T: float):
    """5 x 5 grid of (s, t) with s in {0, ..., 0.4 T} and t in {0.6 T, ..., T}."""
    return [(T * i / 10, T * j / 10) for i in range(5) for j in range(6, 11)]


def run_krylov(cfg: ExperimentConfig, st: _Stages):
    g, b = cfg.group, cfg.drift
    grid = st("grid", cfg.make_grid)
    f = GridField.from_function(grid, lambda t, x: np.sum(b.euclidean(t, x) ** 2, axis=-1))
    n_paths = int(cfg.mc.get("paths", 20_000))
    n_steps = int(cfg.mc.get("steps", 120))
    if n_steps % 10:
        raise ConfigError("mc.steps", "must be a multiple of 10 so the (s, t) pairs fall on the time grid")
    x0 = np.asarray(_p(cfg, "x0", [0.0] * g.N), dtype=float)
    drv = st("driver", sample_driver, g.m, cfg.T, n_steps, cfg.seed, 0, n_paths)
    ens = st("integrate", integrate, g, b, x0, drv, None, "lie_exp")
    rep = st("krylov", krylov_check, g, ens, f, cfg.drift.p, cfg.drift.q, krylov_pairs(cfg.T))
    d = rep.to_dict()
    verdicts = {"ratio_stable": rep.passed}
    report = {"max_ratio": rep.max_ratio, "max_ratio_half": rep.max_ratio_half, "drift": rep.drift,
              "tol": rep.tol, "exponent": rep.exponent, "n_paths": n_paths, "n_steps": n_steps}
    rows = [[s, t, e, r, q] for (s, t), e, r, q in zip(rep.pairs, d["estimates"], d["rhs"], d["ratios"])]
    tables = {"krylov_pairs.csv": (["s", "t", "estimate", "rhs", "ratio"], rows)}
    return report, verdicts, tables, ens.subset(np.arange(min(20, n_paths)))


def run_embedding(cfg: ExperimentConfig, st: _Stages):
    g = cfg.group
    T0 = cfg.T
    Ts = [T0 / 4, T0 / 2, T0]
    gp = cfg.grid
    fam = st("heat_family", heat_family, g, Ts, float(gp.get("radius", 1.0)), float(gp["h"]),
             bounds=gp.get("bounds"), spacing=gp.get("spacing"), bump_radius=float(_p(cfg, "bump_radius", 1.0)))
    e = cfg.params
    res = st("scaling", embedding_scaling_test, fam, int(e.get("k", 0)), int(e.get("l", 0)),
             float(e.get("q", 9)), float(e.get("p", 9)), float(e.get("q1", math.inf)),
             float(e.get("p1", math.inf)))
    verdicts = {"slope_below_alpha": res["passed"]}
    rows = [list(r) for r in zip(res["T"], res["lhs"], res["rhs"], res["ratios"])]
    return res, verdicts, {"embedding.csv": (["T", "lhs", "rhs", "ratio"], rows)}


RUNNERS = {"heat_checks": run_heat_checks, "kernel_scaling": run_kernel_scaling,
           "kolmogorov": run_kolmogorov, "zvonkin_uniqueness": run_zvonkin_uniqueness,
           "krylov": run_krylov, "embedding": run_embedding}


# ---------------------------------------------------------------------------
# orchestration


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def run(source, seed: int | None = None, out: str | None = None, threads: int | None = None) -> tuple:
    """Run an experiment; returns (exit_code, manifest dict)."""
    check = validate(source)
    if not check["valid"]:
        return EXIT_CONFIG, {"verdict": "invalid", "errors": check["errors"]}
    cfg = load_config(source)
    if seed is not None:
        cfg.mc["seed"] = int(seed)
        cfg.raw.setdefault("mc", {})["seed"] = int(seed)
    out_dir = Path(out or cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    threads = threads or thread_count(1)
    st = _Stages()
    manifest = {"name": cfg.name, "experiment": cfg.experiment, "config_hash": config_hash(cfg),
                "version": __version__, "seed": cfg.seed, "threads": threads, "started": _now(),
                "driver": {"seed": cfg.seed, "stage_key": "SeedSequence(seed, spawn_key=(stage, stream, block))"},
                "config_source": cfg.source}
    artifacts = []

    def emit(name, writer):
        writer(out_dir / name)
        artifacts.append(name)

    emit("config.json", lambda p: p.write_text(json.dumps(_jsonable(cfg.raw), indent=2, sort_keys=True)))
    code = EXIT_STAGE
    try:
        res = RUNNERS[cfg.experiment](cfg, st)
        report, verdicts, tables = res[:3]
        for name, (header, rows) in tables.items():
            emit(name, lambda p, h=header, r=rows: _write_csv(p, h, r))
        if len(res) > 3:
            emit("paths_sample.csv", lambda p: write_ensemble(res[3], p))
        verdict = "pass" if all(verdicts.values()) else "fail"
        report = {"scenario": cfg.name, "experiment": cfg.experiment, **report,
                  "verdicts": verdicts, "verdict": verdict}
        emit("report.json", lambda p: p.write_text(json.dumps(_jsonable(report), indent=2)))
        manifest["verdicts"] = verdicts
        manifest["verdict"] = verdict
        code = EXIT_PASS if verdict == "pass" else EXIT_FAIL
    except (StageFailure, ConfigError) as exc:
        log.error("run failed: %s", exc)
        manifest["verdict"] = "stage_failure"
        manifest["error"] = str(exc.__cause__ or exc)
        code = EXIT_STAGE if isinstance(exc, StageFailure) else EXIT_CONFIG
    manifest["stages"] = st.records
    manifest["finished"] = _now()
    artifacts.append("manifest.json")
    manifest["artifacts"] = artifacts
    (out_dir / "manifest.json").write_text(json.dumps(_jsonable(manifest), indent=2))
    return code, manifest
