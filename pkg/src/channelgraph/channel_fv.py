"""Staircase finite volumes for ``L_eps u = 1/2 div(sigma_eps grad u)`` on the channel.

A Cartesian cell is active when its centre lies in the closed domain.  Two
active neighbours exchange flux through their common face with
transmissibility ``1/2 * h_y/h_x`` (x-faces) or ``1/2 eps^-2 * h_x/h_y``
(y-faces); faces towards inactive cells carry nothing, which is the discrete
zero co-normal flux condition.  The flux matrix ``K`` is symmetric with zero
row sums and ``L = K / area``.

Cells are grouped in columns per edge, which makes the cell field a
:class:`~channelgraph.graph_core.ProductGrid` over a graph grid of column
centres; cross-section averages are column means.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import StripComplex
from .graph_core import GraphGrid, GraphSkeleton, LiftedNoise, ProductGrid, wedge
from .graph_operator import Trajectory, _with_closing_diagonal

RANNACHER_STEPS = 4


@dataclass(frozen=True)
class ChannelGrid:
    hx: float
    hy: float
    x0: float
    y0: float
    ij: np.ndarray  # (n_cells, 2) column and row indices of active cells
    edge: np.ndarray  # edge id of each active cell
    columns: ProductGrid = field(repr=False)
    faces_x: np.ndarray = field(repr=False)  # (n, 2) cell pairs sharing a vertical face
    faces_y: np.ndarray = field(repr=False)  # (n, 2) cell pairs sharing a horizontal face
    area_error: float = 0.0

    @property
    def n_cells(self) -> int:
        return self.edge.size

    @property
    def cell_area(self) -> float:
        return self.hx * self.hy

    @property
    def area(self) -> float:
        return self.n_cells * self.cell_area

    @property
    def xc(self) -> np.ndarray:
        return self.x0 + (self.ij[:, 0] + 0.5) * self.hx

    @property
    def yc(self) -> np.ndarray:
        return self.y0 + (self.ij[:, 1] + 0.5) * self.hy

    def sample(self, u: Callable) -> np.ndarray:
        return np.asarray(u(self.xc, self.yc), dtype=float)

    def inner(self, u, v) -> float:
        return float(self.cell_area * np.sum(u * v))

    def norm(self, u) -> float:
        return math.sqrt(max(self.inner(u, u), 0.0))


def build_channel_grid(sc: StripComplex, h: float, min_cells_across: int = 4) -> ChannelGrid:
    """Staircase grid with nominal spacing ``h`` (adjusted to fit the bounding box)."""
    if h <= 0:
        raise ValueError("h must be positive")
    for s in sc.strips:
        xs = np.linspace(s.x_lo, s.x_hi, 1001)[1:-1]
        if float(np.min(s.width(xs))) < min_cells_across * h * (1 - 1e-9):
            raise ValueError(f"strip {s.edge_id} is narrower than {min_cells_across} cells; refine h")
    x_lo, x_hi, y_lo, y_hi = sc.bounding_box
    nx = max(1, int(math.ceil((x_hi - x_lo) / h - 1e-9)))
    ny = max(1, int(math.ceil((y_hi - y_lo) / h - 1e-9)))
    hx = (x_hi - x_lo) / nx
    hy = (y_hi - y_lo) / ny
    I, J = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    xc = x_lo + (I.ravel() + 0.5) * hx
    yc = y_lo + (J.ravel() + 0.5) * hy
    active = sc.contains(xc, yc)
    ii, jj = I.ravel()[active], J.ravel()[active]
    edge = sc.locate_edge(xc[active], yc[active])

    # order cells by (column, edge, row): columns become contiguous blocks
    order = np.lexsort((jj, edge, ii))
    ii, jj, edge = ii[order], jj[order], edge[order]
    ij = np.stack([ii, jj], axis=1)
    n = ii.size
    index = -np.ones((nx, ny), dtype=np.int64)
    index[ii, jj] = np.arange(n)

    right = ii + 1 < nx
    nb = np.where(right, index[np.minimum(ii + 1, nx - 1), jj], -1)
    fx = np.stack([np.arange(n)[nb >= 0], nb[nb >= 0]], axis=1)
    up = jj + 1 < ny
    nb = np.where(up, index[ii, np.minimum(jj + 1, ny - 1)], -1)
    fy = np.stack([np.arange(n)[nb >= 0], nb[nb >= 0]], axis=1)
    if np.any(edge[fy[:, 0]] != edge[fy[:, 1]]):
        raise ValueError("cells of different strips touch across a horizontal face; refine h")

    key = ii * (edge.max() + 2) + (edge + 1)
    starts = np.r_[0, np.nonzero(np.diff(key))[0] + 1]
    counts = np.diff(np.r_[starts, n])
    col = np.repeat(np.arange(starts.size), counts)
    graph = GraphGrid(edge[starts], x_lo + (ii[starts] + 0.5) * hx,
                      counts * hx * hy, np.full(starts.size, -1))
    columns = ProductGrid.from_columns(graph, col, y_lo + (jj + 0.5) * hy, 1.0 / counts[col])
    area_err = abs(n * hx * hy - sc.area()) / sc.area()
    return ChannelGrid(hx, hy, x_lo, y_lo, ij, edge, columns, fx, fy, area_err)


@dataclass(frozen=True)
class ChannelOperator:
    grid: ChannelGrid = field(repr=False)
    eps: float
    K: sp.csr_matrix = field(repr=False)
    L: sp.csr_matrix = field(repr=False)

    @property
    def area_weights(self) -> np.ndarray:
        return np.full(self.grid.n_cells, self.grid.cell_area)


def assemble_Leps(grid: ChannelGrid, eps: float) -> ChannelOperator:
    if eps <= 0:
        raise ValueError("eps must be positive")
    tx = 0.5 * grid.hy / grid.hx
    ty = 0.5 * eps ** -2 * grid.hx / grid.hy
    faces = np.concatenate([grid.faces_x, grid.faces_y])
    w = np.concatenate([np.full(len(grid.faces_x), tx), np.full(len(grid.faces_y), ty)])
    n = grid.n_cells
    off = sp.coo_matrix((np.r_[w, w], (np.r_[faces[:, 0], faces[:, 1]], np.r_[faces[:, 1], faces[:, 0]])),
                        shape=(n, n)).tocsr()
    K = _with_closing_diagonal(off)
    L = _with_closing_diagonal(off * (1.0 / grid.cell_area))
    return ChannelOperator(grid, eps, K, L)


def _stepper(op: ChannelOperator, dt: float, theta: float):
    M = sp.identity(op.grid.n_cells, format="csr") * op.grid.cell_area
    lhs = spla.splu((M - theta * dt * op.K).tocsc())
    rhs = (M + (1 - theta) * dt * op.K).tocsr()
    return lhs, rhs


def solve_channel_pde(op: ChannelOperator, u0, forcing: Callable | None, T: float, dt: float,
                      stride: int = 1, rannacher: int = RANNACHER_STEPS) -> Trajectory:
    """Crank-Nicolson with ``rannacher`` implicit-Euler start-up steps of size ``dt/2``.

    ``u0`` may carry a leading batch axis; forcing is trapezoidal (rectangle
    rule in the start-up steps).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    n = max(1, int(round(T / dt)))
    h = T / n
    area = op.grid.cell_area
    u = np.array(u0, dtype=float)
    ts, us = [0.0], [u.copy()]
    be_lhs, _ = _stepper(op, h / 2, 1.0)
    cn_lhs, cn_rhs = _stepper(op, h, 0.5)
    t = 0.0
    k = 0
    n_start = min(rannacher, 2 * n) // 2
    for k in range(1, n + 1):
        if k <= n_start:
            for _ in range(2):
                t += h / 2
                b = area * u.T
                if forcing is not None:
                    b = b + (h / 2) * area * np.asarray(forcing(t)).T
                u = be_lhs.solve(np.ascontiguousarray(b)).T
        else:
            b = cn_rhs @ u.T
            if forcing is not None:
                b = b + 0.5 * h * area * (np.asarray(forcing(t)) + np.asarray(forcing(t + h))).T
            t += h
            u = cn_lhs.solve(np.ascontiguousarray(b)).T
        t = k * h
        if k % stride == 0 or k == n:
            ts.append(t)
            us.append(u.copy())
    return Trajectory(np.array(ts), np.array(us))


def brownian_log(rng: np.random.Generator, n_steps: int, n_real: int, n_modes: int,
                 dt: float) -> np.ndarray:
    """Increments ``dbeta`` of shape ``(n_steps, n_real, n_modes)``."""
    return math.sqrt(dt) * rng.standard_normal((n_steps, n_real, n_modes))


@dataclass(frozen=True)
class SpdeTrajectory:
    t: np.ndarray
    u: np.ndarray  # (n_stored, n_real, n_unknowns)
    dbeta: np.ndarray  # (n_steps, n_real, n_modes)


def solve_channel_spde(op: ChannelOperator, u0, b: Callable | None, noise: LiftedNoise | None,
                       T: float, dt: float, rng: np.random.Generator | None = None,
                       n_real: int = 1, dbeta: np.ndarray | None = None,
                       stride: int = 1) -> SpdeTrajectory:
    """Semi-implicit Euler-Maruyama ``(I - dt L) u+ = u + dt b(u) + sum_j lambda_j f_j^v dbeta_j``.

    The Brownian increments are drawn up front (or taken from ``dbeta``)
    and returned so the graph solver can replay them.
    """
    n = max(1, int(round(T / dt)))
    h = T / n
    J = noise.noise.n_modes if noise is not None else 0
    if dbeta is None:
        if noise is not None and rng is None:
            raise ValueError("an RNG stream or a Brownian log is required")
        dbeta = brownian_log(rng, n, n_real, J, h) if noise is not None else np.zeros((n, n_real, 0))
    if dbeta.shape[0] != n or dbeta.shape[1] != n_real:
        raise ValueError("Brownian log does not match the time grid or realization count")
    lhs, _ = _stepper(op, h, 1.0)
    area = op.grid.cell_area
    u = np.broadcast_to(np.asarray(u0, dtype=float), (n_real, op.grid.n_cells)).copy()
    ts, us = [0.0], [u.copy()]
    for k in range(n):
        rhs = u.copy()
        if b is not None:
            rhs += h * b(u)
        if noise is not None:
            rhs += noise.increment(dbeta[k])
        u = lhs.solve(np.ascontiguousarray(area * rhs.T)).T
        res = np.max(np.abs(u.T - h * (op.L @ u.T) - rhs.T))
        if res > 1e-10 * max(1.0, np.max(np.abs(rhs))):
            raise RuntimeError("linear solve missed tolerance 1e-10")
        if (k + 1) % stride == 0 or k + 1 == n:
            ts.append((k + 1) * h)
            us.append(u.copy())
    return SpdeTrajectory(np.array(ts), np.array(us), dbeta)


def wedge_field(grid: ChannelGrid, u) -> np.ndarray:
    """Column means per edge: the cross-section average on the column grid."""
    return wedge(u, grid.columns)
