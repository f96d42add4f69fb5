"""Euler-Skorokhod simulation of the co-normally reflected diffusion.

The process solves ``dZ = sqrt(sigma) dB + sigma nu dphi`` with
``sigma = diag(1, eps**-2)``.  A step adds the Gaussian increment and, if the
point left the closed domain, pushes it back along ``sigma nu``; the push
multiplier is the local-time increment.  The frozen-slow companion keeps
``x`` fixed on windows of length ``gamma`` and moves ``y`` with the same
Brownian increments inside the frozen cross-section.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import rng as rngmod
from .geometry import ReflectionError, StripComplex, curve_normal, reflect_batch

MAX_HALVINGS = 4
WORKERS_ENV = "CHANNELGRAPH_WORKERS"


@dataclass(frozen=True)
class SimConfig:
    eps: float
    dt: float | None = None
    T: float = 1.0
    seed: int = 0
    n_paths: int = 1000
    scheme: str = "mirror"

    def __post_init__(self):
        if self.dt is None:
            object.__setattr__(self, "dt", self.eps ** 2 / 20)
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if not 0 < self.dt <= self.eps ** 2 / 10 * (1 + 1e-12):
            raise ValueError("dt must satisfy 0 < dt <= eps^2/10")
        if self.n_paths < 1:
            raise ValueError("n_paths must be at least 1")
        if self.scheme not in ("mirror", "projection"):
            raise ValueError("scheme must be 'mirror' or 'projection'")

    def steps(self, t: float) -> int:
        return int(round(t / self.dt))


@dataclass(frozen=True)
class ReflectedState:
    position: tuple[float, float]
    phi: float = 0.0
    time: float = 0.0


def workers_from_env() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


# stepping --------------------------------------------------------------------

def advance(sc: StripComplex, x, y, dB1, dB2, eps: float, dt: float,
            rng: np.random.Generator, depth: int = 0, scheme: str = "mirror"):
    """One Euler-Skorokhod step from given Brownian increments.

    ``scheme="projection"`` stops an overshooting point on the boundary;
    ``scheme="mirror"`` sends it back by twice the projection push along
    ``sigma nu`` (repeated if the mirror image is still outside, projected
    as a last resort).  Returns ``(x, y, dphi)`` where ``dphi`` is the total
    multiplier of ``sigma nu`` applied.  Points whose correction fails are
    redone in two half steps along a Brownian bridge (at most
    ``MAX_HALVINGS`` deep).
    """
    if scheme not in ("mirror", "projection"):
        raise ValueError(f"unknown scheme {scheme!r}")
    xs = x + dB1
    ys = y + dB2 / eps
    xi, yi, d, _, _, _, _, failed = reflect_batch(sc, xs, ys, 1.0, eps ** -2, strict=False)
    if scheme == "mirror":
        hit = np.nonzero((d > 0) & ~failed)[0]
        last = d.copy()
        for _ in range(3):
            if hit.size == 0:
                break
            xm, ym = 2 * xi[hit] - xs[hit], 2 * yi[hit] - ys[hit]
            d[hit] += last[hit]
            xs[hit], ys[hit] = xm, ym
            xi[hit], yi[hit] = xm, ym
            out = ~sc.contains(xm, ym)
            hit = hit[out]
            if hit.size == 0:
                break
            r = reflect_batch(sc, xm[out], ym[out], 1.0, eps ** -2, strict=False)
            xi[hit], yi[hit] = r[0], r[1]
            failed[hit] |= r[7]
            d[hit] += r[2]
            last[hit] = r[2]
            hit = hit[(r[2] > 0) & ~r[7]]
        # images still outside after three mirrors keep their projection
    if np.any(failed):
        if depth >= MAX_HALVINGS:
            raise ReflectionError("reflection failed after the maximal number of step halvings")
        idx = np.nonzero(failed)[0]
        h = dt / 2
        b1 = dB1[idx] / 2 + math.sqrt(h / 2) * rng.standard_normal(idx.size)
        b2 = dB2[idx] / 2 + math.sqrt(h / 2) * rng.standard_normal(idx.size)
        xa, ya, da = advance(sc, x[idx], y[idx], b1, b2, eps, h, rng, depth + 1, scheme)
        xb, yb, db = advance(sc, xa, ya, dB1[idx] - b1, dB2[idx] - b2, eps, h, rng, depth + 1, scheme)
        xi[idx], yi[idx], d[idx] = xb, yb, da + db
    return xi, yi, d


def step_reflected(sc: StripComplex, state: ReflectedState, cfg: SimConfig,
                   rng: np.random.Generator) -> ReflectedState:
    dB = math.sqrt(cfg.dt) * rng.standard_normal(2)
    x, y, d = advance(sc, np.array([state.position[0]]), np.array([state.position[1]]),
                      dB[:1], dB[1:], cfg.eps, cfg.dt, rng, scheme=cfg.scheme)
    return ReflectedState((float(x[0]), float(y[0])), state.phi + float(d[0]), state.time + cfg.dt)


@dataclass(frozen=True)
class PathRecord:
    t: np.ndarray  # (n_rec,)
    x: np.ndarray  # (n_rec, n_paths)
    y: np.ndarray
    phi: np.ndarray

    def to_records(self) -> np.ndarray:
        """Float64 records ``(path, t, x, y, phi)``, path-major."""
        n_rec, n_paths = self.x.shape
        out = np.empty((n_paths, n_rec, 5))
        out[..., 0] = np.arange(n_paths)[:, None]
        out[..., 1] = self.t[None, :]
        out[..., 2] = self.x.T
        out[..., 3] = self.y.T
        out[..., 4] = self.phi.T
        return out.reshape(-1, 5)


def simulate_batch(sc: StripComplex, z0, eps: float, dt: float, n_steps: int, n_paths: int,
                   rng: np.random.Generator, record: Sequence[int] | None = None,
                   scheme: str = "mirror") -> PathRecord:
    """``n_paths`` independent paths; positions stored at step indices ``record``."""
    if not bool(sc.contains(z0[0], z0[1])):
        raise ValueError("start point is outside the domain")
    record = sorted(set(record if record is not None else [n_steps]))
    want = set(record)
    x = np.full(n_paths, float(z0[0]))
    y = np.full(n_paths, float(z0[1]))
    phi = np.zeros(n_paths)
    xs, ys, ps = [], [], []
    sq = math.sqrt(dt)
    if 0 in want:
        xs.append(x.copy()), ys.append(y.copy()), ps.append(phi.copy())
    for k in range(1, n_steps + 1):
        dB = sq * rng.standard_normal((2, n_paths))
        x, y, d = advance(sc, x, y, dB[0], dB[1], eps, dt, rng, scheme=scheme)
        phi = phi + d
        if k in want:
            xs.append(x.copy()), ys.append(y.copy()), ps.append(phi.copy())
    return PathRecord(np.asarray(record, dtype=float) * dt, np.array(xs), np.array(ys), np.array(ps))


def simulate_path(sc: StripComplex, z0, cfg: SimConfig, rng: np.random.Generator,
                  stride: int = 1) -> PathRecord:
    """One path on ``[0, T]`` stored every ``stride`` steps."""
    n = cfg.steps(cfg.T)
    rec = list(range(0, n + 1, stride))
    if rec[-1] != n:
        rec.append(n)
    return simulate_batch(sc, z0, cfg.eps, cfg.dt, n, 1, rng, rec, cfg.scheme)


# Monte Carlo -------------------------------------------------------------------

def _mc_chunk(args):
    sc, z0, eps, dt, steps, seed, experiment, chunk, count, phi_fn, scheme = args
    g = rngmod.stream(seed, experiment, chunk)
    rec = simulate_batch(sc, z0, eps, dt, max(steps), count, g, steps, scheme)
    order = {s: i for i, s in enumerate(sorted(set(steps)))}
    out = []
    for s in steps:
        v = phi_fn(rec.x[order[s]], rec.y[order[s]])
        v = np.broadcast_to(np.asarray(v, dtype=float), rec.x[order[s]].shape)
        out.append((v.sum(), (v * v).sum(), v.size))
    return out


def mc_expectation(sc: StripComplex, z0, cfg: SimConfig, t, phi_fn: Callable,
                   experiment: str = "mc", workers: int | None = None):
    """Mean and standard error of ``phi(Z(t))`` over ``cfg.n_paths`` paths.

    ``t`` may be a scalar or a sequence (one simulation serves all times).
    Paths are simulated in fixed chunks with streams keyed by the chunk
    index, so results do not depend on the worker count.
    """
    times = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(times > cfg.T + 1e-12):
        raise ValueError("t must not exceed T")
    steps = [cfg.steps(s) for s in times]
    jobs = [(sc, tuple(z0), cfg.eps, cfg.dt, steps, cfg.seed, experiment, c, n, phi_fn, cfg.scheme)
            for c, n in rngmod.chunks(cfg.n_paths)]
    workers = workers_from_env() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(_mc_chunk, jobs))
    else:
        parts = [_mc_chunk(j) for j in jobs]
    means, ses = [], []
    for i in range(len(steps)):
        s1 = sum(p[i][0] for p in parts)
        s2 = sum(p[i][1] for p in parts)
        n = sum(p[i][2] for p in parts)
        m = s1 / n
        var = max(s2 / n - m * m, 0.0) * n / max(n - 1, 1)
        means.append(m)
        ses.append(math.sqrt(var / n))
    if np.ndim(t) == 0:
        return means[0], ses[0]
    return np.array(means), np.array(ses)


# frozen-slow companion ------------------------------------------------------------

def gamma_eps(eps: float, kappa1: float = 0.5) -> float:
    """Window length ``eps^2 log(eps^-kappa1)``."""
    return eps ** 2 * math.log(eps ** (-kappa1))


def _window_len(gamma: float, dt: float) -> int:
    m = int(round(gamma / dt))
    if m < 1:
        raise ValueError("gamma must be at least one time step")
    return m


@dataclass(frozen=True)
class CoupledRecord:
    t: np.ndarray  # step times, 0..n
    sq_gap: np.ndarray  # path-mean of |Z - Zhat|^2 at every step
    window_phi_hat: np.ndarray  # (n_windows, n_paths) frozen local time gained per window
    y_hat_end: np.ndarray  # frozen y at the end of the first window
    x: np.ndarray = field(repr=False)  # final positions
    y: np.ndarray = field(repr=False)
    x_hat: np.ndarray = field(repr=False)
    y_hat: np.ndarray = field(repr=False)


def frozen_step(yh, lo, hi, n_lo, n_hi, eps: float, scheme: str = "mirror"):
    """Reflect frozen ``y`` values into ``[lo, hi]``; returns ``(y, dphi_hat)``.

    A vertical overshoot ``o`` corresponds to the multiplier ``eps^2 o/|nu_2|``
    of ``sigma_hat nu``; the mirror image doubles the push.
    """
    dphi = np.zeros_like(yh)
    if scheme == "mirror":
        for _ in range(3):
            below = np.maximum(lo - yh, 0.0)
            above = np.maximum(yh - hi, 0.0)
            if not (np.any(below) or np.any(above)):
                break
            dphi += eps ** 2 * 2 * (below / n_lo + above / n_hi)
            yh = yh + 2 * below - 2 * above
    below = np.maximum(lo - yh, 0.0)
    above = np.maximum(yh - hi, 0.0)
    dphi += eps ** 2 * (below / n_lo + above / n_hi)
    return np.clip(yh, lo, hi), dphi


def _single_strip(sc: StripComplex):
    if len(sc.strips) != 1:
        raise ValueError("the frozen-slow process is defined on single-strip domains")
    return sc.strips[0]


def frozen_slow_batch(sc: StripComplex, z0, eps: float, dt: float, gamma: float, n_steps: int,
                      n_paths: int, rng: np.random.Generator, scheme: str = "mirror") -> CoupledRecord:
    """Coupled ``(Z, Zhat)`` paths sharing Brownian increments.

    At every window start ``k gamma`` the companion is reset to ``Z``; inside
    the window ``x`` is frozen and ``y`` moves by ``dB2/eps`` with projection
    onto the frozen cross-section.  The frozen local time uses
    ``sigma_hat nu = (0, eps^-2 nu_2)``, so a vertical overshoot ``o`` costs
    ``eps^2 o / |nu_2|``.
    """
    s = _single_strip(sc)
    m = _window_len(gamma, dt)
    x = np.full(n_paths, float(z0[0]))
    y = np.full(n_paths, float(z0[1]))
    sq = math.sqrt(dt)
    gaps = np.zeros(n_steps + 1)
    windows = []
    y_hat_first = None
    xh = x.copy()
    yh = y.copy()
    for k in range(n_steps):
        if k % m == 0:
            xh, yh = x.copy(), y.copy()
            lo, hi = s.h_lo(xh), s.h_hi(xh)
            n_lo = np.abs(curve_normal(s, "lower", xh)[1])
            n_hi = np.abs(curve_normal(s, "upper", xh)[1])
            acc = np.zeros(n_paths)
            windows.append(acc)
        dB = sq * rng.standard_normal((2, n_paths))
        x, y, _ = advance(sc, x, y, dB[0], dB[1], eps, dt, rng, scheme=scheme)
        yh, dh = frozen_step(yh + dB[1] / eps, lo, hi, n_lo, n_hi, eps, scheme)
        acc += dh
        gaps[k + 1] = np.mean((x - xh) ** 2 + (y - yh) ** 2)
        if (k + 1) == m and y_hat_first is None:
            y_hat_first = yh.copy()
    if y_hat_first is None:
        y_hat_first = yh.copy()
    n_full = n_steps // m
    return CoupledRecord(np.arange(n_steps + 1) * dt, gaps, np.array(windows[:n_full]),
                         y_hat_first, x, y, xh, yh)


def frozen_slow_path(sc: StripComplex, z0, cfg: SimConfig, gamma: float,
                     rng: np.random.Generator) -> dict:
    """Single coupled path; returns arrays ``t, x, y, x_hat, y_hat, phi, phi_hat``."""
    s = _single_strip(sc)
    m = _window_len(gamma, cfg.dt)
    n = cfg.steps(cfg.T)
    out = {k: np.empty(n + 1) for k in ("t", "x", "y", "x_hat", "y_hat", "phi", "phi_hat")}
    x, y = np.array([float(z0[0])]), np.array([float(z0[1])])
    phi = phi_hat = 0.0
    xh, yh = x.copy(), y.copy()
    sq = math.sqrt(cfg.dt)
    out["t"][0], out["x"][0], out["y"][0] = 0.0, x[0], y[0]
    out["x_hat"][0], out["y_hat"][0], out["phi"][0], out["phi_hat"][0] = x[0], y[0], 0.0, 0.0
    for k in range(n):
        if k % m == 0:
            xh, yh = x.copy(), y.copy()
            lo, hi = s.h_lo(xh), s.h_hi(xh)
            n_lo = np.abs(curve_normal(s, "lower", xh)[1])
            n_hi = np.abs(curve_normal(s, "upper", xh)[1])
        dB = sq * rng.standard_normal(2)
        x, y, d = advance(sc, x, y, dB[:1], dB[1:], cfg.eps, cfg.dt, rng, scheme=cfg.scheme)
        phi += float(d[0])
        yh, dh = frozen_step(yh + dB[1] / cfg.eps, lo, hi, n_lo, n_hi, cfg.eps, cfg.scheme)
        phi_hat += float(dh[0])
        i = k + 1
        out["t"][i], out["x"][i], out["y"][i] = i * cfg.dt, x[0], y[0]
        out["x_hat"][i], out["y_hat"][i], out["phi"][i], out["phi_hat"][i] = xh[0], yh[0], phi, phi_hat
    return out


# local time diagnostics ------------------------------------------------------------

def local_time_moments(phi_paths, times, r: float, t: float, p: int):
    """``p``-th moment (and standard error) of ``phi(t) - phi(r)`` over paths.

    ``phi_paths`` has shape ``(n_times, n_paths)``.
    """
    if p not in (1, 2, 4):
        raise ValueError("p must be 1, 2 or 4")
    if not 0 <= r <= t:
        raise ValueError("need 0 <= r <= t")
    times = np.asarray(times, dtype=float)
    i = int(np.argmin(np.abs(times - r)))
    j = int(np.argmin(np.abs(times - t)))
    inc = np.asarray(phi_paths)[j] - np.asarray(phi_paths)[i]
    v = inc ** p
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0


def bound_shape(eps: float, gamma: float, p: int = 2) -> float:
    return gamma ** p + eps ** p * gamma ** (p / 2) + eps ** (2 * p)


@dataclass(frozen=True)
class DominationReport:
    c: float
    eps: tuple
    measured: tuple
    bound: tuple
    ratio: tuple
    holds: bool


def fit_and_dominate(eps_list, gammas, moments, p: int = 2, slack: float = 1.5) -> DominationReport:
    """Fit ``c`` at the first (coarsest) eps and check ``m <= slack c shape`` at the rest."""
    shapes = [bound_shape(e, g, p) for e, g in zip(eps_list, gammas)]
    c = moments[0] / shapes[0]
    bounds = [c * s for s in shapes]
    ratio = [m / b for m, b in zip(moments, bounds)]
    holds = all(r <= slack for r in ratio[1:])
    return DominationReport(c, tuple(eps_list), tuple(moments), tuple(bounds), tuple(ratio), holds)


# cross-section relaxation oracle ------------------------------------------------------

def _modes(y, y0: float, l: float, j):
    base = np.where(j == 0, 1.0 / math.sqrt(l), math.sqrt(2.0 / l))
    return base * np.cos(j * math.pi * (np.asarray(y)[..., None] - y0) / l)


def _n_modes(l: float, eps: float, s: float, cap: int = 4000) -> int:
    if s <= 0:
        return cap
    # keep modes while exp(-s/(2 eps^2) (j pi / l)^2) >= 1e-14
    jmax = math.sqrt(2 * eps ** 2 * math.log(1e14) / s) * l / math.pi
    return int(min(cap, math.ceil(jmax) + 1))


def cross_section_relaxation(sc: StripComplex, x: float, edge: int, eps: float, s: float,
                             f: Callable, n_quad: int = 512) -> Callable:
    """Exact transition of the frozen fast motion applied to ``f`` on ``C_k(x)``.

    The fast motion is reflected Brownian motion with generator
    ``(1/(2 eps^2)) d^2/dy^2``; its Neumann modes are ``1/sqrt(l)`` and
    ``sqrt(2/l) cos(j pi (y - y_lo)/l)`` with decay rates ``(j pi/l)^2 / 2``
    per unit of ``s / eps^2``.
    """
    strip = sc.strip(edge)
    y0, y1 = strip.interval(x)
    l = y1 - y0
    j = np.arange(_n_modes(l, eps, s))
    t, w = np.polynomial.legendre.leggauss(n_quad)
    yq = y0 + 0.5 * l * (t + 1)
    coef = (0.5 * l * w * np.asarray(f(yq), dtype=float)) @ _modes(yq, y0, l, j)
    decay = np.exp(-(s / (2 * eps ** 2)) * (j * math.pi / l) ** 2)
    coef = coef * decay

    def value(y):
        return _modes(y, y0, l, j) @ coef

    return value


def relaxation_cdf(sc: StripComplex, x: float, edge: int, eps: float, s: float,
                   y_start: float) -> Callable:
    """CDF of the frozen fast motion at time ``s`` started from ``y_start``."""
    strip = sc.strip(edge)
    y0, y1 = strip.interval(x)
    l = y1 - y0
    j = np.arange(_n_modes(l, eps, s))
    decay = np.exp(-(s / (2 * eps ** 2)) * (j * math.pi / l) ** 2)
    a = decay * _modes(np.array(y_start), y0, l, j)

    def cdf(y):
        y = np.clip(np.asarray(y, dtype=float), y0, y1)
        z = y - y0
        integ = np.where(j == 0, z[..., None] / math.sqrt(l),
                         math.sqrt(2.0 / l) * l / (np.maximum(j, 1) * math.pi)
                         * np.sin(j * math.pi * z[..., None] / l))
        return integ @ a

    return cdf
