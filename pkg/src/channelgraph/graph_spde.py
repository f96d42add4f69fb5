"""Stochastic heat equation on the graph and the coupled channel comparison.

Both SPDEs are stepped with the same semi-implicit Euler-Maruyama scheme

    (I - dt L) u+ = u + dt b(u) + sum_j lambda_j f_j dbeta_j,

and, in the comparison, with the same Brownian increments: the channel is
driven by the lifted modes ``f_j^v`` and the graph by ``f_j``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .channel_fv import (SpdeTrajectory, assemble_Leps, brownian_log, build_channel_grid,
                         solve_channel_spde, wedge_field)
from .geometry import StripComplex
from .graph_core import (NoiseModel, build_graph, cross_section_average, graph_cosine_noise,
                         lift_noise)
from .graph_operator import DiscreteGraphOperator, Spectrum, assemble_generator, eigen_decompose


@dataclass(frozen=True)
class GraphSpdeState:
    u: np.ndarray
    t: float
    cursor: int


def solve_graph_spde(op: DiscreteGraphOperator, noise: NoiseModel | None, u0, b: Callable | None,
                     T: float, dt: float, rng: np.random.Generator | None = None,
                     dbeta: np.ndarray | None = None, n_real: int = 1, stride: int = 1,
                     modes: np.ndarray | None = None) -> SpdeTrajectory:
    """Semi-implicit Euler-Maruyama on the graph unknowns.

    ``dbeta`` (``(n_steps, n_real, n_modes)``) replays a shared Brownian log;
    otherwise increments are drawn from ``rng``.
    """
    n = max(1, int(round(T / dt)))
    h = T / n
    J = noise.n_modes if noise is not None else 0
    if dbeta is None:
        if noise is not None and rng is None:
            raise ValueError("an RNG stream or a Brownian log is required")
        dbeta = brownian_log(rng, n, n_real, J, h) if noise is not None else np.zeros((n, n_real, 0))
    else:
        n_real = dbeta.shape[1]
        if dbeta.shape[0] != n or dbeta.shape[2] != J:
            raise ValueError("Brownian log does not match the time grid or the noise modes")
    if noise is not None and modes is None:
        modes = noise.modes_on(op.grid, op.graph)
    M = sp.diags(op.mass)
    lhs = spla.splu((M - h * op.K).tocsc())
    u = np.broadcast_to(np.asarray(u0, dtype=float), (n_real, op.size)).copy()
    ts, us = [0.0], [u.copy()]
    for k in range(n):
        rhs = u.copy()
        if b is not None:
            rhs += h * b(u)
        if noise is not None:
            rhs += noise.increment(modes, dbeta[k])
        u = lhs.solve(np.ascontiguousarray(op.mass[:, None] * rhs.T)).T
        if (k + 1) % stride == 0 or k + 1 == n:
            ts.append((k + 1) * h)
            us.append(u.copy())
    return SpdeTrajectory(np.array(ts), np.array(us), dbeta)


def stochastic_convolution_cov(op: DiscreteGraphOperator, noise: NoiseModel, t: float,
                               spectrum: Spectrum | None = None,
                               modes: np.ndarray | None = None) -> np.ndarray:
    """Covariance of ``int_0^t exp((t-s)L) dW(s)`` from the eigenpairs of ``L``."""
    spec = eigen_decompose(op) if spectrum is None else spectrum
    if modes is None:
        modes = noise.modes_on(op.grid, op.graph)
    if t == 0:
        return np.zeros((op.size, op.size))
    A = (modes * op.mass) @ spec.phi  # a_jp = <f_j, phi_p>_W
    s = spec.mu[:, None] + spec.mu[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        G = np.where(s == 0, t, np.expm1(s * t) / np.where(s == 0, 1.0, s))
    inner = np.einsum("j,jp,jq->pq", noise.lambdas ** 2, A, A) * G
    return spec.phi @ inner @ spec.phi.T


REACTIONS = {
    "linear": lambda u: -u,
    "tanh": np.tanh,
    "sin": np.sin,
    "zero": None,
}


@dataclass
class CompareConfig:
    eps: tuple = (0.4, 0.2, 0.1)
    h: float = 0.05
    cells_per_edge: int = 200
    dt: float = 0.01
    T: float = 1.0
    tau: float | None = None
    n_real: int = 100
    n_modes: int = 4
    lambdas: tuple | None = None
    b: str = "tanh"
    u0: Callable = field(default=lambda x, y: np.cos(x) * (1.0 + y))
    seed: int = 0
    stride: int = 1

    def reaction(self):
        return REACTIONS[self.b]


@dataclass(frozen=True)
class CompareRow:
    eps: float
    mean_sq_sup: float
    stderr: float
    n_real: int


def compare_channel_graph(sc: StripComplex, cfg: CompareConfig,
                          rng: np.random.Generator | None = None,
                          trace: list | None = None) -> list[CompareRow]:
    """``E sup_{t in [tau, T]} |u_eps^ - u_bar|^2`` for every eps, pathwise coupled.

    One Brownian log drives the graph solution and every channel solution.
    The graph solution is interpolated to the column centres of the channel
    grid and the error is measured with the column weights.  If ``trace`` is
    a list, rows ``(eps, t, norm, mass)`` of the first channel realization
    are appended to it.
    """
    tau = 0.25 * cfg.T if cfg.tau is None else cfg.tau
    g = build_graph(sc)
    grid = build_channel_grid(sc, cfg.h)
    op_g = assemble_generator(g, cfg.cells_per_edge)
    lambdas = (2.0 ** -np.arange(1, cfg.n_modes + 1) if cfg.lambdas is None
               else np.asarray(cfg.lambdas, dtype=float))
    noise = graph_cosine_noise(g, grid.columns.graph, lambdas)
    lifted = lift_noise(noise, grid.columns)
    b = cfg.reaction()
    n = max(1, int(round(cfg.T / cfg.dt)))
    if rng is None:
        from .rng import stream
        rng = stream(cfg.seed, "spde-convergence", 0)
    dbeta = brownian_log(rng, n, cfg.n_real, noise.n_modes, cfg.T / n)
    u0_cells = grid.sample(cfg.u0)
    u0_graph = op_g.sample(cross_section_average(g, cfg.u0))
    graph = solve_graph_spde(op_g, noise, u0_graph, b, cfg.T, cfg.dt, dbeta=dbeta, stride=cfg.stride)
    cols = grid.columns.graph
    keep = graph.t >= tau - 1e-12
    ubar = op_g.interpolate(graph.u[keep], cols.edge, cols.x)
    rows = []
    for eps in cfg.eps:
        op_c = assemble_Leps(grid, eps)
        ch = solve_channel_spde(op_c, u0_cells, b, lifted, cfg.T, cfg.dt, dbeta=dbeta,
                                n_real=cfg.n_real, stride=cfg.stride)
        if trace is not None:
            for t, u in zip(ch.t, ch.u[:, 0]):
                trace.append({"eps": eps, "t": float(t), "norm": grid.norm(u),
                              "mass": float(grid.cell_area * u.sum())})
        uw = wedge_field(grid, ch.u[keep])
        err = np.einsum("trn,n->tr", (uw - ubar) ** 2, cols.weight)
        sup = err.max(axis=0)
        rows.append(CompareRow(eps, float(sup.mean()),
                               float(sup.std(ddof=1) / math.sqrt(sup.size)) if sup.size > 1 else 0.0,
                               int(sup.size)))
    return rows
