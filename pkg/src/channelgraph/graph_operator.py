"""Finite-volume generator of the graph diffusion with Kirchhoff gluing.

Each edge ``[a, b]`` is cut into ``n`` cells of size ``D``; unknowns sit at
the nodes ``a + j D``.  The two end nodes of an edge are shared with every
other edge meeting at the same vertex, so a vertex carries one unknown whose
control volume is the union of the incident half cells.  With face weights
``l`` evaluated at face midpoints the flux form

    (L f)_i = 1/(2 m_i) * sum_faces l_face (f_nb - f_i) / D

gives ``L = M^-1 K`` with ``K`` symmetric and zero row sums, so constants
are annihilated, ``m = diag(M)`` is invariant and the vertex row is the
discrete weighted flux balance.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import GraphPoint
from .graph_core import GraphGrid, GraphSkeleton

DENSE_LIMIT = 2000
EIGEN_LIMIT = 5000


@dataclass(frozen=True)
class DiscreteGraphOperator:
    graph: GraphSkeleton = field(repr=False)
    cells: dict  # edge_id -> n
    grid: GraphGrid  # node layout; weights are the masses
    K: sp.csr_matrix = field(repr=False)  # symmetric flux matrix
    L: sp.csr_matrix = field(repr=False)
    edge_nodes: dict = field(repr=False)  # edge_id -> node indices along the edge, ends included

    @property
    def mass(self) -> np.ndarray:
        return self.grid.weight

    @property
    def size(self) -> int:
        return self.grid.size

    def spacing(self, edge_id: int) -> float:
        e = self.graph.edge(edge_id)
        return e.length / self.cells[edge_id]

    def sample(self, fn: Callable) -> np.ndarray:
        """Evaluate ``fn(edge_ids, x)`` at the unknowns.

        A shared vertex unknown takes the ``l``-weighted mean of the incident
        one-sided values, which is exact for functions continuous there.
        """
        g = self.grid
        out = np.empty(g.size)
        on_edge = g.edge >= 0
        out[on_edge] = fn(g.edge[on_edge], g.x[on_edge])
        for i in np.nonzero(~on_edge)[0]:
            v = next(v for v in self.graph.vertices if v.vertex_id == g.vertex[i])
            acc = wsum = 0.0
            for eid, end in v.incident:
                e = self.graph.edge(eid)
                xe = e.x_lo if end == "left" else e.x_hi
                w = float(e.width(xe))
                acc += w * float(np.asarray(fn(np.array([eid]), np.array([xe])))[0])
                wsum += w
            out[i] = acc / wsum if wsum > 0 else acc
        return out

    def interpolate(self, values, edge, x) -> np.ndarray:
        """Piecewise-linear interpolation of nodal values at points ``(edge, x)``.

        ``values`` may carry leading batch axes.
        """
        values = np.asarray(values, dtype=float)
        edge = np.asarray(edge)
        x = np.asarray(x, dtype=float)
        out = np.empty(values.shape[:-1] + x.shape)
        for eid, nodes in self.edge_nodes.items():
            mask = edge == eid
            if not np.any(mask):
                continue
            e = self.graph.edge(eid)
            seg = values[..., nodes]
            pos = np.clip((x[mask] - e.x_lo) / (e.x_hi - e.x_lo) * (nodes.size - 1), 0, nodes.size - 1)
            j = np.minimum(pos.astype(int), nodes.size - 2)
            t = pos - j
            out[..., mask] = seg[..., j] * (1 - t) + seg[..., j + 1] * t
        return out

    def node_of(self, p: GraphPoint) -> int:
        """Index of the unknown nearest to a graph point."""
        if p.is_vertex:
            hit = np.nonzero((self.grid.edge < 0) & (self.grid.vertex == p.vertex))[0]
            return int(hit[0])
        nodes = self.edge_nodes[p.edge]
        e = self.graph.edge(p.edge)
        j = int(round((p.x - e.x_lo) / (e.x_hi - e.x_lo) * (nodes.size - 1)))
        return int(nodes[min(max(j, 0), nodes.size - 1)])

    def inner(self, f, g) -> float:
        return self.grid.inner(f, g)

    def dump(self, path) -> None:
        """Write triplets, masses and node layout (``.npz`` or ``.json``)."""
        coo = self.L.tocoo()
        data = {"row": coo.row, "col": coo.col, "val": coo.data, "mass": self.mass,
                "edge": self.grid.edge, "x": self.grid.x, "vertex": self.grid.vertex}
        path = Path(path)
        if path.suffix == ".json":
            path.write_text(json.dumps({k: np.asarray(v).tolist() for k, v in data.items()}))
        else:
            np.savez(path, **data)


def assemble_generator(g: GraphSkeleton, cells_per_edge) -> DiscreteGraphOperator:
    """Assemble ``L`` with ``cells_per_edge`` cells on every edge (int or dict)."""
    if isinstance(cells_per_edge, dict):
        cells = {e.edge_id: int(cells_per_edge[e.edge_id]) for e in g.edges}
    else:
        cells = {e.edge_id: int(cells_per_edge) for e in g.edges}
    if min(cells.values()) < 4:
        raise ValueError("cells_per_edge must be at least 4")

    vid_index: dict[int, int] = {}
    edge_col, x_col, vert_col, mass = [], [], [], []
    for v in g.vertices:
        vid_index[v.vertex_id] = len(x_col)
        edge_col.append(-1)
        x_col.append(v.x)
        vert_col.append(v.vertex_id)
        mass.append(0.0)

    rows, cols, vals = [], [], []
    edge_nodes = {}
    for e in g.edges:
        n = cells[e.edge_id]
        d = e.length / n
        xs = e.x_lo + d * np.arange(n + 1)
        xs[-1] = e.x_hi
        faces = e.x_lo + d * (np.arange(n) + 0.5)
        lf = np.asarray(e.width(faces), dtype=float)
        if np.any(lf <= 0):
            raise ValueError(f"edge {e.edge_id}: non-positive face weight")
        left = vid_index[g.end_vertex(e.edge_id, "left").vertex_id]
        right = vid_index[g.end_vertex(e.edge_id, "right").vertex_id]
        start = len(x_col)
        for j in range(1, n):
            edge_col.append(e.edge_id)
            x_col.append(xs[j])
            vert_col.append(-1)
            mass.append(float(e.width(xs[j])) * d)
        nodes = np.concatenate([[left], np.arange(start, start + n - 1), [right]]).astype(int)
        edge_nodes[e.edge_id] = nodes
        mass[left] += lf[0] * d / 2
        mass[right] += lf[-1] * d / 2
        c = lf / (2.0 * d)
        rows.extend(nodes[:-1])
        cols.extend(nodes[1:])
        vals.extend(c)

    n_tot = len(x_col)
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    vals = np.asarray(vals)
    off = sp.coo_matrix((np.concatenate([vals, vals]), (np.concatenate([rows, cols]),
                                                        np.concatenate([cols, rows]))),
                        shape=(n_tot, n_tot)).tocsr()
    off.sum_duplicates()
    mass = np.asarray(mass)
    K = _with_closing_diagonal(off)
    Loff = sp.diags(1.0 / mass) @ off
    L = _with_closing_diagonal(sp.csr_matrix(Loff))
    grid = GraphGrid(np.asarray(edge_col), np.asarray(x_col, dtype=float), mass, np.asarray(vert_col))
    return DiscreteGraphOperator(g, cells, grid, K, L, edge_nodes)


def _with_closing_diagonal(off: sp.csr_matrix) -> sp.csr_matrix:
    """Append ``-row sum`` as the last stored entry of each row.

    Summing a row in storage order then cancels exactly.
    """
    off = off.tocsr()
    off.sort_indices()
    n = off.shape[0]
    indptr = np.zeros(n + 1, dtype=np.int64)
    counts = np.diff(off.indptr) + 1
    indptr[1:] = np.cumsum(counts)
    indices = np.empty(indptr[-1], dtype=np.int64)
    data = np.empty(indptr[-1])
    for i in range(n):
        a, b = off.indptr[i], off.indptr[i + 1]
        s = indptr[i]
        k = b - a
        indices[s:s + k] = off.indices[a:b]
        data[s:s + k] = off.data[a:b]
        acc = 0.0
        for v in off.data[a:b]:
            acc += v
        indices[s + k] = i
        data[s + k] = -acc
    return sp.csr_matrix((data, indices, indptr), shape=off.shape)


def row_sums(L: sp.csr_matrix) -> np.ndarray:
    """Row sums accumulated in storage order."""
    out = np.empty(L.shape[0])
    for i in range(L.shape[0]):
        acc = 0.0
        for v in L.data[L.indptr[i]:L.indptr[i + 1]]:
            acc += v
        out[i] = acc
    return out


def stationary_check(op: DiscreteGraphOperator, L=None) -> float:
    """``|nu^T L|_inf / |nu|_inf`` for the assembled (or a supplied) matrix."""
    L = op.L if L is None else L
    nu = op.mass
    return float(np.max(np.abs(L.T @ nu)) / np.max(np.abs(nu)))


def symmetry_defect(op: DiscreteGraphOperator) -> float:
    WL = sp.diags(op.mass) @ op.L
    return float(abs(WL - WL.T).max() / abs(WL).max())


# semigroup ------------------------------------------------------------------

def apply_semigroup(op: DiscreteGraphOperator, f0, t: float, method: str = "dense-exp",
                    dt: float | None = None) -> np.ndarray:
    """``exp(t L) f0`` by dense matrix exponential or Crank-Nicolson."""
    if t < 0:
        raise ValueError("t must be non-negative")
    f0 = np.asarray(f0, dtype=float)
    if t == 0:
        return f0.copy()
    if method == "dense-exp":
        if op.size > DENSE_LIMIT:
            raise ValueError(f"dense-exp is limited to {DENSE_LIMIT} unknowns")
        return sla.expm(t * op.L.toarray()) @ f0
    if method == "crank-nicolson":
        dmin = min(op.spacing(e) for e in op.cells)
        dt = dmin ** 2 / 2 if dt is None else dt
        if dt > dmin ** 2 / 2 * (1 + 1e-12):
            raise ValueError("Crank-Nicolson step must satisfy dt <= D^2/2")
        n = max(1, int(math.ceil(t / dt - 1e-9)))
        h = t / n
        M = sp.diags(op.mass)
        lhs = spla.splu((M - 0.5 * h * op.K).tocsc())
        rhs = (M + 0.5 * h * op.K).tocsr()
        u = f0.copy()
        for _ in range(n):
            u = lhs.solve(rhs @ u)
        return u
    raise ValueError(f"unknown method {method!r}")


@dataclass(frozen=True)
class Trajectory:
    t: np.ndarray
    u: np.ndarray  # (n_stored, ..., n_unknowns)


def solve_graph_pde(op: DiscreteGraphOperator, f0, forcing: Callable | None, T: float,
                    dt: float, stride: int = 1) -> Trajectory:
    """Crank-Nicolson for ``u' = L u + h(t)`` with trapezoidal forcing."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    n = max(1, int(round(T / dt)))
    h = T / n
    M = sp.diags(op.mass)
    lhs = spla.splu((M - 0.5 * h * op.K).tocsc())
    rhs = (M + 0.5 * h * op.K).tocsr()
    u = np.asarray(f0, dtype=float).copy()
    ts, us = [0.0], [u.copy()]
    f_prev = forcing(0.0) if forcing is not None else None
    for k in range(1, n + 1):
        b = rhs @ u
        if forcing is not None:
            f_next = forcing(k * h)
            b = b + 0.5 * h * op.mass * (f_prev + f_next)
            f_prev = f_next
        u = lhs.solve(b)
        if k % stride == 0 or k == n:
            ts.append(k * h)
            us.append(u.copy())
    return Trajectory(np.array(ts), np.array(us))


@dataclass(frozen=True)
class Spectrum:
    mu: np.ndarray  # descending, mu[0] = 0
    phi: np.ndarray  # columns are mass-orthonormal eigenvectors
    mass: np.ndarray = field(repr=False)

    def project(self, f) -> np.ndarray:
        return self.phi.T @ (self.mass * f)

    def semigroup(self, f, t: float) -> np.ndarray:
        return self.phi @ (np.exp(self.mu * t) * self.project(f))


def eigen_decompose(op: DiscreteGraphOperator) -> Spectrum:
    """Eigenpairs from the symmetric form ``W^-1/2 K W^-1/2``."""
    if op.size > EIGEN_LIMIT:
        raise ValueError(f"eigen_decompose is limited to {EIGEN_LIMIT} unknowns")
    s = 1.0 / np.sqrt(op.mass)
    S = (s[:, None] * op.K.toarray()) * s[None, :]
    S = 0.5 * (S + S.T)
    try:
        mu, V = np.linalg.eigh(S)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError("eigen decomposition did not converge") from exc
    order = np.argsort(mu)[::-1]
    mu = mu[order]
    phi = s[:, None] * V[:, order]
    # the top eigenvalue is zero with a constant eigenvector
    mu[0] = 0.0
    phi[:, 0] = 1.0 / math.sqrt(op.mass.sum())
    return Spectrum(mu, phi, op.mass)


# CTMC sampling ----------------------------------------------------------------

@dataclass(frozen=True)
class JumpTable:
    rate: np.ndarray
    nbr: np.ndarray
    cum: np.ndarray


def jump_table(op: DiscreteGraphOperator) -> JumpTable:
    L = op.L.tocsr()
    n = L.shape[0]
    deg = np.diff(L.indptr) - 1
    width = int(deg.max())
    nbr = np.zeros((n, width), dtype=np.int64)
    cum = np.ones((n, width))
    rate = np.zeros(n)
    for i in range(n):
        a, b = L.indptr[i], L.indptr[i + 1]
        idx, val = L.indices[a:b], L.data[a:b]
        keep = idx != i
        idx, val = idx[keep], val[keep]
        rate[i] = val.sum()
        nbr[i, :idx.size] = idx
        nbr[i, idx.size:] = idx[-1]
        cum[i, :idx.size] = np.cumsum(val) / rate[i]
        cum[i, idx.size - 1:] = 1.0
    return JumpTable(rate, nbr, cum)


def sample_graph_diffusion(op: DiscreteGraphOperator, start, t: float, rng: np.random.Generator,
                           n_samples: int = 1, table: JumpTable | None = None) -> np.ndarray:
    """Node indices of ``n_samples`` CTMC paths at time ``t`` (Gillespie)."""
    table = jump_table(op) if table is None else table
    if isinstance(start, GraphPoint):
        start = op.node_of(start)
    state = np.full(n_samples, int(start), dtype=np.int64)
    if t <= 0:
        return state
    clock = np.zeros(n_samples)
    active = np.arange(n_samples)
    while active.size:
        s = state[active]
        clock[active] += rng.exponential(1.0, active.size) / table.rate[s]
        moving = clock[active] <= t
        active = active[moving]
        s = s[moving]
        u = rng.random(active.size)
        k = (table.cum[s] < u[:, None]).sum(axis=1)
        k = np.minimum(k, table.nbr.shape[1] - 1)
        state[active] = table.nbr[s, k]
    return state
