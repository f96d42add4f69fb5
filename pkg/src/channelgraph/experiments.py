"""Experiment drivers shared by the command line, the scripts and the test suite.

Every driver returns a list of row dicts (the CSV payload) and a boolean
verdict computed with the tolerances it was given.
"""
from __future__ import annotations

import ast
import math
from typing import Callable

import numpy as np
from scipy import stats
from scipy.integrate import quad

from . import rng as rngmod
from .channel_fv import assemble_Leps, build_channel_grid, solve_channel_pde
from .geometry import StripComplex, project_to_graph
from .graph_core import (build_graph, cross_section_average, gauss_product_grid, graph_cosine_noise,
                         lift_noise, rescale_J, simpson_grid, split_K1_K2, vee, wedge)
from .graph_operator import (apply_semigroup, assemble_generator, row_sums, solve_graph_pde,
                             stationary_check, symmetry_defect)
from .graph_spde import CompareConfig, compare_channel_graph
from .reflected_sim import (SimConfig, fit_and_dominate, frozen_slow_batch, gamma_eps, mc_expectation,
                            relaxation_cdf, simulate_batch)

# observables ------------------------------------------------------------------

_FUNCS = {name: getattr(np, name) for name in
          ("sin", "cos", "tan", "exp", "log", "sqrt", "tanh", "abs", "sinh", "cosh", "arctan")}
_CONSTS = {"pi": math.pi, "e": math.e}
_ALLOWED = (ast.Expression, ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Load, ast.Constant,
            ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.USub, ast.UAdd, ast.Compare,
            ast.Lt, ast.Gt, ast.LtE, ast.GtE)


class Observable:
    """Arithmetic expression in ``x`` and ``y`` (numpy functions allowed); picklable."""

    def __init__(self, expr: str):
        tree = ast.parse(expr, mode="eval")
        for node in ast.walk(tree):
            if not isinstance(node, _ALLOWED):
                raise ValueError(f"unsupported syntax in observable: {type(node).__name__}")
            if isinstance(node, ast.Name) and node.id not in {"x", "y", *_FUNCS, *_CONSTS}:
                raise ValueError(f"unknown name in observable: {node.id}")
        self.expr = expr
        self._code = compile(tree, "<observable>", "eval")

    def __getstate__(self):
        return {"expr": self.expr}

    def __setstate__(self, state):
        self.__init__(state["expr"])

    def __call__(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        out = eval(self._code, {"__builtins__": {}}, {"x": x, "y": y, **_FUNCS, **_CONSTS})
        shape = np.broadcast(x, y).shape
        return np.array(np.broadcast_to(np.asarray(out, dtype=float), shape))


def parse_observable(expr: str) -> Observable:
    return Observable(expr)


# semigroup convergence -----------------------------------------------------------

def limit_value(sc: StripComplex, phi: Callable, z0, t: float, cells_per_edge: int = 400) -> float:
    """``S_bar(t) phi^ (Pi z0)`` on a fine graph grid (dense exponential)."""
    g = build_graph(sc)
    op = assemble_generator(g, cells_per_edge)
    f = op.sample(cross_section_average(g, phi))
    u = apply_semigroup(op, f, t, "dense-exp" if op.size <= 2000 else "crank-nicolson")
    p = project_to_graph(sc, z0)
    if p.is_vertex:
        return float(u[op.node_of(p)])
    return float(op.interpolate(u, np.array([p.edge]), np.array([p.x]))[0])


def ladder_decreasing(values, ses, k: float = 3.0) -> bool:
    """Each value is below its predecessor up to ``k`` combined standard errors."""
    return all(values[i + 1] <= values[i] + k * math.hypot(ses[i], ses[i + 1])
               for i in range(len(values) - 1))


def semigroup_mc_ladder(sc: StripComplex, phi: Callable, z0, eps_list, times, n_paths: int,
                        seed: int, dt_factor: float = 1 / 20, final_tol: float = 0.03,
                        cells_per_edge: int = 400, dt: float | None = None,
                        se_multiple: float = 3.0):
    refs = {t: limit_value(sc, phi, z0, t, cells_per_edge) for t in times}
    rows = []
    for eps in eps_list:
        step = eps ** 2 * dt_factor if dt is None else dt
        cfg = SimConfig(eps=eps, dt=step, T=max(times), seed=seed, n_paths=n_paths)
        means, ses = mc_expectation(sc, z0, cfg, list(times), phi, experiment=f"semigroup-{eps}")
        for t, m, s in zip(times, means, ses):
            rows.append({"eps": eps, "t": t, "mean": float(m), "stderr": float(s), "n": n_paths,
                         "reference": refs[t], "gap": abs(float(m) - refs[t])})
    ok = True
    for t in times:
        sub = [r for r in rows if r["t"] == t]
        ok &= ladder_decreasing([r["gap"] for r in sub], [r["stderr"] for r in sub], se_multiple)
        ok &= sub[-1]["gap"] <= se_multiple * sub[-1]["stderr"] + final_tol
    return rows, bool(ok)


def semigroup_fv_ladder(sc: StripComplex, phi: Callable, eps_list, h: float, cells_per_edge: int,
                        dt: float, t_lo: float = 0.25, t_hi: float = 1.0, final_rel: float = 0.05):
    """``sup_t |S_eps(t) phi - (S_bar(t) phi^)^v|`` in ``L^2`` of the staircase grid."""
    g = build_graph(sc)
    grid = build_channel_grid(sc, h)
    op_g = assemble_generator(g, cells_per_edge)
    u0 = grid.sample(phi)
    f0 = op_g.sample(cross_section_average(g, phi))
    n = int(round(t_hi / dt))
    gt = solve_graph_pde(op_g, f0, None, t_hi, dt)
    cols = grid.columns
    keep = gt.t >= t_lo - 1e-12
    ubar = vee(op_g.interpolate(gt.u[keep], cols.graph.edge, cols.graph.x), cols)
    phi_norm = grid.norm(u0)
    rows = []
    for eps in eps_list:
        op = assemble_Leps(grid, eps)
        ch = solve_channel_pde(op, u0, None, t_hi, dt)
        diff = ch.u[keep] - ubar
        errs = np.sqrt(grid.cell_area * np.sum(diff ** 2, axis=1))
        rows.append({"eps": eps, "sup_error": float(errs.max()), "phi_norm": phi_norm,
                     "relative": float(errs.max() / phi_norm), "n_steps": n})
    vals = [r["sup_error"] for r in rows]
    ok = all(vals[i + 1] < vals[i] for i in range(len(vals) - 1)) and rows[-1]["relative"] <= final_rel
    return rows, bool(ok)


# frozen-slow and local time -------------------------------------------------------------

def frozen_slow_ladder(sc: StripComplex, z0, eps_list, n_pairs: int, seed: int, T: float = 1.0,
                       kappa1: float = 0.5, dt_factor: float = 1 / 20, dt: float | None = None):
    rows = []
    dt_fixed = dt
    for eps in eps_list:
        dt = eps ** 2 * dt_factor if dt_fixed is None else dt_fixed
        m = max(1, int(round(gamma_eps(eps, kappa1) / dt)))
        gamma = m * dt
        rec = frozen_slow_batch(sc, z0, eps, dt, gamma, int(round(T / dt)), n_pairs,
                                rngmod.stream(seed, f"frozen-slow-{eps}", 0))
        i = int(np.argmax(rec.sq_gap))
        rows.append({"eps": eps, "gamma": gamma, "window_steps": m, "sup_mean_sq_gap": float(rec.sq_gap[i]),
                     "argmax_t": float(rec.t[i]), "n": n_pairs,
                     "mean_window_phi_hat_sq": float((rec.window_phi_hat ** 2).mean(axis=1).max())})
    vals = [r["sup_mean_sq_gap"] for r in rows]
    ok = all(vals[i + 1] < vals[i] for i in range(len(vals) - 1))
    return rows, bool(ok)


def local_time_ladder(sc: StripComplex, z0, eps_list, n_paths: int, seed: int, T: float = 1.0,
                      kappa1: float = 0.5, dt_factor: float = 1 / 20, slack: float = 1.5,
                      dt: float | None = None):
    """Second moment of the frozen local time over one window, max over windows."""
    ladder, _ = frozen_slow_ladder(sc, z0, eps_list, n_paths, seed, T, kappa1, dt_factor, dt)
    moments = [r["mean_window_phi_hat_sq"] for r in ladder]
    rep = fit_and_dominate([r["eps"] for r in ladder], [r["gamma"] for r in ladder], moments, 2, slack)
    rows = [{"eps": e, "gamma": r["gamma"], "moment": m, "bound": b, "ratio": q, "c": rep.c}
            for e, r, m, b, q in zip(rep.eps, ladder, rep.measured, rep.bound, rep.ratio)]
    return rows, bool(rep.holds)


# equilibration -------------------------------------------------------------------------

def equilibration_ks(sc: StripComplex, z0, eps: float, n: int, seed: int, kappa1: float = 0.5,
                     dt_factor: float = 1 / 20, threshold: float = 0.05):
    """KS distance between frozen-window ``y`` samples and the spectral transition law."""
    dt = eps ** 2 * dt_factor
    m = max(1, int(round(gamma_eps(eps, kappa1) / dt)))
    gamma = m * dt
    rec = frozen_slow_batch(sc, z0, eps, dt, gamma, m, n, rngmod.stream(seed, "equilibration-ks", 0))
    p = project_to_graph(sc, z0)
    cdf = relaxation_cdf(sc, p.x, p.edge, eps, gamma, z0[1])
    res = stats.kstest(rec.y_hat_end, cdf)
    return {"check": "ks", "eps": eps, "statistic": float(res.statistic), "threshold": threshold,
            "pvalue": float(res.pvalue), "n": n, "pass": bool(res.statistic <= threshold)}


def bin_areas(sc: StripComplex, xe, ye) -> np.ndarray:
    """Exact area of ``G`` inside each rectangle of a tensor grid."""
    A = np.zeros((len(xe) - 1, len(ye) - 1))
    for s in sc.strips:
        for i in range(len(xe) - 1):
            a, b = max(xe[i], s.x_lo), min(xe[i + 1], s.x_hi)
            if b <= a:
                continue
            for j in range(len(ye) - 1):
                def inside(x, j=j):
                    lo = np.clip(s.h_lo(x), ye[j], ye[j + 1])
                    hi = np.clip(s.h_hi(x), ye[j], ye[j + 1])
                    return hi - lo
                A[i, j] += quad(inside, a, b, limit=200, epsabs=1e-13)[0]
    return A


def equilibration_chi2(sc: StripComplex, z0, eps: float, T: float, n_paths: int, seed: int,
                       bins: int = 10, alpha: float = 0.01, dt_factor: float = 1 / 20):
    """Chi-square test of uniform occupation at time ``T`` (one sample per path)."""
    dt = eps ** 2 * dt_factor
    xs, ys = [], []
    for c, count in rngmod.chunks(n_paths):
        rec = simulate_batch(sc, z0, eps, dt, int(round(T / dt)), count,
                             rngmod.stream(seed, "equilibration-chi2", c))
        xs.append(rec.x[-1])
        ys.append(rec.y[-1])
    x, y = np.concatenate(xs), np.concatenate(ys)
    x0, x1, y0, y1 = sc.bounding_box
    xe, ye = np.linspace(x0, x1, bins + 1), np.linspace(y0, y1, bins + 1)
    H = np.histogram2d(x, y, [xe, ye])[0]
    A = bin_areas(sc, xe, ye)
    E = n_paths * A / A.sum()
    keep = E >= 5
    chi = float(((H[keep] - E[keep]) ** 2 / E[keep]).sum())
    dof = int(keep.sum()) - 1
    p = float(stats.chi2.sf(chi, dof))
    return {"check": "chi2", "eps": eps, "statistic": chi, "threshold": alpha, "pvalue": p,
            "n": n_paths, "bins_used": int(keep.sum()), "pass": bool(p > alpha)}


# operator algebra --------------------------------------------------------------------------

def operator_selfchecks(sc: StripComplex, seed: int = 0, n_cases: int = 100,
                        n_per_edge: int = 32, cells_per_edge: int = 32, tol: float = 1e-8):
    """Averaging/lifting identities and discrete generator invariants."""
    rng = rngmod.stream(seed, "operator-selfchecks", 0)
    g = build_graph(sc)
    gg = simpson_grid(g, n_per_edge)
    pg = gauss_product_grid(g, gg)
    out = []

    def add(name, value, limit, ok=None):
        out.append({"check": name, "value": float(value), "tolerance": float(limit),
                    "pass": bool(value <= limit if ok is None else ok)})

    worst = {k: 0.0 for k in ("vee_wedge", "isometry", "contraction", "adjoint", "k1k2")}
    for _ in range(n_cases):
        f = rng.standard_normal(gg.size)
        u = rng.standard_normal(pg.size)
        worst["vee_wedge"] = max(worst["vee_wedge"], np.max(np.abs(wedge(vee(f, pg), pg) - f)))
        worst["isometry"] = max(worst["isometry"], abs(pg.norm(vee(f, pg)) - gg.norm(f)) / gg.norm(f))
        worst["contraction"] = max(worst["contraction"], gg.norm(wedge(u, pg)) - pg.norm(u))
        lhs, rhs = gg.inner(wedge(u, pg), f), pg.inner(u, vee(f, pg))
        worst["adjoint"] = max(worst["adjoint"], abs(lhs - rhs) / (pg.norm(u) * gg.norm(f)))
        u1, u2 = split_K1_K2(u, pg)
        worst["k1k2"] = max(worst["k1k2"], abs(pg.inner(u1, u2)) / pg.norm(u) ** 2)
    add("wedge(vee f) = f", worst["vee_wedge"], tol)
    add("|vee f| = |f|", worst["isometry"], tol)
    add("|wedge u| <= |u|", worst["contraction"], tol)
    add("<wedge u, f> = <u, vee f>", worst["adjoint"], tol)
    add("<u1, u2> = 0", worst["k1k2"], tol)

    n = gg.size
    lam = np.sort(rng.random(n))[::-1]
    A = np.diag(lam)
    I = np.eye(n)
    AA = wedge(vee((A @ wedge(vee(I, pg), pg).T).T, pg), pg).T
    add("(A^v)^ = A", np.max(np.abs(AA - A)), tol)

    op = assemble_generator(g, cells_per_edge)
    add("L 1 = 0", np.max(np.abs(row_sums(op.L))), 0.0)
    add("nu^T L = 0", stationary_check(op), 1e-12)
    add("W-symmetry", symmetry_defect(op), 1e-12)
    worst_pair = 0.0
    for _ in range(n_cases):
        f, h = rng.standard_normal(op.size), rng.standard_normal(op.size)
        a, b = op.inner(op.L @ f, h), op.inner(f, op.L @ h)
        worst_pair = max(worst_pair, abs(a - b) / max(abs(a), abs(b), 1e-300))
    add("<Lf, g>_W = <f, Lg>_W", worst_pair, 1e-12)
    corrupted = op.L.copy()
    corrupted.data[0] += 1e-3
    add("negative control: corrupted L detected", stationary_check(op, corrupted), 1e-4,
        ok=stationary_check(op, corrupted) >= 1e-4)

    for e1, e2 in ((0.3, 0.1), (1.0, 0.05)):
        u = lambda x, y: np.cos(x) * np.exp(y) + y ** 2
        a, b = pg.scaled(e1), pg.scaled(e2)
        v = rescale_J(u, e1, e2)
        add(f"|J u| = |u| ({e1}->{e2})", abs(b.norm(v(b.x, b.y)) - a.norm(u(a.x, a.y))) / a.norm(u(a.x, a.y)),
            1e-10)

    noise = graph_cosine_noise(g, gg, 2.0 ** -np.arange(1, 5))
    lifted = lift_noise(noise, pg)
    add("|Q|_HS = |A|_HS", abs(lifted.hs_norm() - noise.hs_norm), 1e-8)
    db = rng.standard_normal((3, noise.n_modes))
    add("wedge(channel increment) = graph increment",
        np.max(np.abs(wedge(lifted.increment(db), pg) - lifted.graph_increment(db))), 0.0)
    return out, all(r["pass"] for r in out)


def spde_ladder(sc: StripComplex, cfg: CompareConfig, trace: list | None = None):
    rows = compare_channel_graph(sc, cfg, trace=trace)
    out = [{"eps": r.eps, "mean_sq_sup": r.mean_sq_sup, "stderr": r.stderr, "n": r.n_real} for r in rows]
    vals = [r.mean_sq_sup for r in rows]
    ok = all(vals[i + 1] < vals[i] for i in range(len(vals) - 1))
    return out, bool(ok)
