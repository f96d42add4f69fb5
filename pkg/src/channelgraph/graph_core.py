"""The identification graph, its measure, and the averaging/lifting pair.

Functions on the graph live on a :class:`GraphGrid`, a weighted point set
``(edge, x, weight)`` whose weights are a quadrature for ``nu = l_k(x) dx``.
Functions on the channel live on a :class:`ProductGrid`: every graph point
owns a column of ``(x, y)`` samples whose weights sum to the graph weight.
With that layout the averaging map (wedge) and the lifting map (vee) are
exact adjoints of each other in floating point, independently of how good
the underlying quadrature is.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.integrate import quad

from .geometry import GraphPoint, StripComplex, Strip, Vertex, DomainError


@dataclass(frozen=True)
class Edge:
    edge_id: int
    x_lo: float
    x_hi: float
    strip: Strip = field(repr=False)

    @property
    def length(self) -> float:
        return self.x_hi - self.x_lo

    def width(self, x):
        return self.strip.width(x)

    def dwidth(self, x):
        return self.strip.dwidth(x)


@dataclass(frozen=True)
class GraphSkeleton:
    edges: tuple[Edge, ...]
    vertices: tuple[Vertex, ...]
    complex: StripComplex = field(repr=False)

    def edge(self, edge_id: int) -> Edge:
        for e in self.edges:
            if e.edge_id == edge_id:
                return e
        raise KeyError(edge_id)

    def edge_index(self, edge_id: int) -> int:
        for i, e in enumerate(self.edges):
            if e.edge_id == edge_id:
                return i
        raise KeyError(edge_id)

    def end_vertex(self, edge_id: int, end: str) -> Vertex:
        return self.complex.end_vertex(edge_id, end)

    @property
    def interior_vertices(self) -> list[Vertex]:
        return [v for v in self.vertices if v.kind == "interior"]


def build_graph(sc: StripComplex) -> GraphSkeleton:
    """One edge per strip and one vertex per merge group or free strip end."""
    edges = tuple(Edge(s.edge_id, s.x_lo, s.x_hi, s) for s in sc.strips)
    # connectivity through shared vertices
    parent = {e.edge_id: e.edge_id for e in edges}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for v in sc.vertices:
        ids = [sid for sid, _ in v.incident]
        for a in ids[1:]:
            parent[find(a)] = find(ids[0])
    if len({find(e.edge_id) for e in edges}) > 1:
        raise DomainError("the strip complex is disconnected")
    return GraphSkeleton(edges, sc.vertices, sc)


# distance ---------------------------------------------------------------

def _vertex_distances(g: GraphSkeleton, source: dict[int, float]) -> dict[int, float]:
    adj: dict[int, list[tuple[int, float]]] = {v.vertex_id: [] for v in g.vertices}
    for e in g.edges:
        a = g.end_vertex(e.edge_id, "left").vertex_id
        b = g.end_vertex(e.edge_id, "right").vertex_id
        adj[a].append((b, e.length))
        adj[b].append((a, e.length))
    dist = {v: math.inf for v in adj}
    heap = []
    for v, d in source.items():
        if d < dist[v]:
            dist[v] = d
            heapq.heappush(heap, (d, v))
    while heap:
        d, v = heapq.heappop(heap)
        if d > dist[v]:
            continue
        for w, length in adj[v]:
            if d + length < dist[w]:
                dist[w] = d + length
                heapq.heappush(heap, (d + length, w))
    return dist


def _anchors(g: GraphSkeleton, p: GraphPoint) -> dict[int, float]:
    if p.is_vertex:
        return {p.vertex: 0.0}
    e = g.edge(p.edge)
    return {g.end_vertex(e.edge_id, "left").vertex_id: p.x - e.x_lo,
            g.end_vertex(e.edge_id, "right").vertex_id: e.x_hi - p.x}


def graph_distance(g: GraphSkeleton, p1: GraphPoint, p2: GraphPoint) -> float:
    """Shortest-path distance along the graph (Dijkstra over the vertices)."""
    if p1 == p2:
        return 0.0
    best = math.inf
    if not p1.is_vertex and not p2.is_vertex and p1.edge == p2.edge:
        best = abs(p1.x - p2.x)
    dist = _vertex_distances(g, _anchors(g, p1))
    for v, d in _anchors(g, p2).items():
        best = min(best, dist[v] + d)
    return best


def measure_nu(g: GraphSkeleton, region: Sequence[tuple[int, float, float]] | None = None) -> float:
    """``nu`` of a list of ``(edge_id, x0, x1)`` intervals; whole graph if ``None``."""
    if region is None:
        region = [(e.edge_id, e.x_lo, e.x_hi) for e in g.edges]
    total = 0.0
    for eid, x0, x1 in region:
        e = g.edge(eid)
        if x1 <= x0:
            continue
        total += quad(e.width, x0, x1, epsabs=0.0, epsrel=1e-12, limit=200)[0]
    return float(total)


# grids --------------------------------------------------------------------

@dataclass(frozen=True)
class GraphGrid:
    """Weighted point set on the graph.

    ``vertex[i]`` is the vertex id of a point sitting at a vertex (an edge
    endpoint sample or a shared vertex unknown), else -1.  ``edge[i]`` is -1
    for a shared vertex unknown.
    """

    edge: np.ndarray
    x: np.ndarray
    weight: np.ndarray
    vertex: np.ndarray

    @property
    def size(self) -> int:
        return self.x.size

    def inner(self, f, g) -> float:
        return float(np.sum(self.weight * f * g))

    def norm(self, f) -> float:
        return math.sqrt(max(self.inner(f, f), 0.0))

    def edge_mask(self, edge_id: int) -> np.ndarray:
        return self.edge == edge_id


def simpson_grid(g: GraphSkeleton, n_per_edge: int = 64) -> GraphGrid:
    """Composite Simpson nodes (endpoints included) on every edge, weighted by ``l``."""
    if n_per_edge < 2 or n_per_edge % 2:
        raise ValueError("n_per_edge must be a positive even integer")
    base = np.ones(n_per_edge + 1)
    base[1:-1:2] = 4.0
    base[2:-1:2] = 2.0
    edges, xs, ws, vs = [], [], [], []
    for e in g.edges:
        x = np.linspace(e.x_lo, e.x_hi, n_per_edge + 1)
        hx = e.length / n_per_edge
        w = base * hx / 3.0 * np.maximum(e.width(x), 0.0)
        v = np.full(x.size, -1)
        v[0] = g.end_vertex(e.edge_id, "left").vertex_id
        v[-1] = g.end_vertex(e.edge_id, "right").vertex_id
        edges.append(np.full(x.size, e.edge_id))
        xs.append(x)
        ws.append(w)
        vs.append(v)
    return GraphGrid(np.concatenate(edges), np.concatenate(xs), np.concatenate(ws), np.concatenate(vs))


@dataclass(frozen=True)
class ProductGrid:
    """Channel samples grouped in columns over the points of a graph grid.

    ``weight`` is the absolute (Lebesgue) quadrature weight of each sample and
    equals ``graph.weight[col] * rel``; ``rel`` sums to one over a column.
    """

    graph: GraphGrid
    col: np.ndarray
    y: np.ndarray
    rel: np.ndarray
    _first: np.ndarray = field(repr=False)
    _avg: sp.csr_matrix = field(repr=False)

    @classmethod
    def from_columns(cls, graph: GraphGrid, col, y, rel) -> "ProductGrid":
        col = np.asarray(col, dtype=int)
        rel = np.asarray(rel, dtype=float)
        n = graph.size
        if np.any(np.bincount(col, minlength=n) == 0):
            raise ValueError("every graph point needs at least one channel sample")
        first = np.full(n, -1)
        order = np.arange(col.size)[::-1]
        first[col[order]] = order
        avg = sp.csr_matrix((rel, (col, np.arange(col.size))), shape=(n, col.size))
        return cls(graph, col, np.asarray(y, dtype=float), rel, first, avg)

    @property
    def x(self) -> np.ndarray:
        return self.graph.x[self.col]

    @property
    def edge(self) -> np.ndarray:
        return self.graph.edge[self.col]

    @property
    def weight(self) -> np.ndarray:
        return self.graph.weight[self.col] * self.rel

    @property
    def size(self) -> int:
        return self.col.size

    def inner(self, u, v) -> float:
        return float(np.sum(self.weight * u * v))

    def norm(self, u) -> float:
        return math.sqrt(max(self.inner(u, u), 0.0))

    def scaled(self, eps: float) -> "ProductGrid":
        """The same samples on ``G_eps = {(x, eps y)}``: ``y`` and weights scale by ``eps``."""
        graph = GraphGrid(self.graph.edge, self.graph.x, self.graph.weight * eps, self.graph.vertex)
        return ProductGrid(graph, self.col, self.y * eps, self.rel, self._first, self._avg)


def gauss_product_grid(g: GraphSkeleton, graph: GraphGrid, n_y: int = 16) -> ProductGrid:
    """Gauss-Legendre nodes across every cross-section of a graph grid."""
    t, gw = np.polynomial.legendre.leggauss(n_y)
    cols, ys, rels = [], [], []
    for i in range(graph.size):
        eid = graph.edge[i]
        s = g.edge(eid).strip
        y0, y1 = float(s.h_lo(graph.x[i])), float(s.h_hi(graph.x[i]))
        cols.append(np.full(n_y, i))
        ys.append(0.5 * (y0 + y1) + 0.5 * (y1 - y0) * t)
        rels.append(gw / 2.0)
    return ProductGrid.from_columns(graph, np.concatenate(cols), np.concatenate(ys), np.concatenate(rels))


# averaging and lifting ----------------------------------------------------

def wedge(u, grid: ProductGrid) -> np.ndarray:
    """Cross-section average; columns of ``u`` are samples (leading axes batch).

    Computed as a shifted mean so that a column-constant field averages to
    its column value bit-for-bit.
    """
    u = np.asarray(u, dtype=float)
    base = u[..., grid._first]
    dev = u - base[..., grid.col]
    if dev.ndim == 1:
        return base + grid._avg @ dev
    flat = dev.reshape(-1, dev.shape[-1])
    return base + (grid._avg @ flat.T).T.reshape(base.shape)


def vee(f, grid: ProductGrid) -> np.ndarray:
    """Lift a graph function to the channel samples (constant on cross-sections)."""
    return np.asarray(f, dtype=float)[..., grid.col]


def wedge_callable(u: Callable, grid: ProductGrid) -> np.ndarray:
    return wedge(u(grid.x, grid.y), grid)


def split_K1_K2(u, grid: ProductGrid) -> tuple[np.ndarray, np.ndarray]:
    """``u1 = (u^)v`` in the lifted subspace and ``u2 = u - u1`` with zero averages."""
    u1 = vee(wedge(u, grid), grid)
    return u1, np.asarray(u, dtype=float) - u1


def lift_operator(A: np.ndarray, grid: ProductGrid) -> Callable:
    """``A^v u = (A u^)^v`` for a matrix ``A`` acting on graph-grid values."""
    return lambda u: vee(A @ wedge(u, grid), grid)


def average_operator(Q: Callable, grid: ProductGrid) -> Callable:
    """``Q^ f = (Q f^v)^`` for an operator on channel samples."""
    return lambda f: wedge(Q(vee(f, grid)), grid)


def operator_matrix(op: Callable, n: int) -> np.ndarray:
    return np.column_stack([op(np.eye(n)[:, i]) for i in range(n)])


# rescaling ------------------------------------------------------------------

def rescale_J(u: Callable, eps1: float, eps2: float) -> Callable:
    """``J_{eps2,eps1} u (x, y) = sqrt(eps1/eps2) u(x, eps1 y / eps2)``: ``G_eps1 -> G_eps2``."""
    if eps1 <= 0 or eps2 <= 0:
        raise ValueError("eps must be positive")
    if eps1 == eps2:
        return u
    c = math.sqrt(eps1 / eps2)
    r = eps1 / eps2
    return lambda x, y: c * u(x, r * np.asarray(y))


def rescale_J_samples(u, eps1: float, eps2: float) -> np.ndarray:
    """J on samples stored at matched points (``y`` scaled by ``eps2/eps1``)."""
    return math.sqrt(eps1 / eps2) * np.asarray(u, dtype=float)


# noise ----------------------------------------------------------------------

@dataclass(frozen=True)
class CosineFamily:
    """Per-edge cosines ``cos(m pi (x - a_k)/(b_k - a_k))`` plus the global constant."""

    edges: tuple[tuple[int, float, float], ...]
    max_m: int

    def candidates(self) -> list[tuple[int | None, int]]:
        out: list[tuple[int | None, int]] = [(None, 0)]
        for m in range(self.max_m + 1):
            for eid, _, _ in self.edges:
                out.append((eid, m))
        return out

    def evaluate(self, edge, x) -> np.ndarray:
        """Candidate matrix (n_candidates, n_points) at points on edges."""
        edge = np.asarray(edge)
        x = np.asarray(x, dtype=float)
        rows = []
        spans = {eid: (a, b) for eid, a, b in self.edges}
        for eid, m in self.candidates():
            if eid is None:
                rows.append(np.ones_like(x))
                continue
            a, b = spans[eid]
            rows.append(np.where(edge == eid, np.cos(m * math.pi * (x - a) / (b - a)), 0.0))
        return np.array(rows)


@dataclass(frozen=True)
class NoiseModel:
    """Diagonal covariance ``A f_j = lambda_j f_j`` with ``f_j`` orthonormal in ``L^2(nu)``.

    Modes are stored as coefficients over a :class:`CosineFamily` so they can
    be evaluated on any grid; they are orthonormal on the grid they were
    built on.
    """

    lambdas: np.ndarray
    coeffs: np.ndarray
    family: CosineFamily
    widths: dict = field(repr=False, default_factory=dict)

    @property
    def n_modes(self) -> int:
        return self.lambdas.size

    @property
    def hs_norm(self) -> float:
        return float(np.sqrt(np.sum(self.lambdas ** 2)))

    def modes_on(self, grid: GraphGrid, g: GraphSkeleton | None = None) -> np.ndarray:
        """Mode values (n_modes, n_points).

        Shared vertex unknowns (``edge == -1``) take the ``l``-weighted mean
        of the incident one-sided values.
        """
        vals = self.coeffs @ self.family.evaluate(grid.edge, grid.x)
        shared = np.nonzero(grid.edge < 0)[0]
        if shared.size:
            if g is None:
                raise ValueError("graph skeleton needed for shared vertex unknowns")
            for i in shared:
                v = next(v for v in g.vertices if v.vertex_id == grid.vertex[i])
                acc, wsum = 0.0, 0.0
                for eid, end in v.incident:
                    e = g.edge(eid)
                    xe = e.x_lo if end == "left" else e.x_hi
                    w = float(e.width(xe))
                    acc = acc + w * (self.coeffs @ self.family.evaluate([eid], [xe]))[:, 0]
                    wsum += w
                vals[:, i] = acc / wsum if wsum > 0 else acc
        return vals

    def increment(self, modes: np.ndarray, dbeta) -> np.ndarray:
        """``sum_j lambda_j f_j dbeta_j``; ``dbeta`` has trailing axis ``n_modes``."""
        return (np.asarray(dbeta) * self.lambdas) @ modes


def decay_lambdas(n: int, law: str = "geometric", s: float = 2.0) -> np.ndarray:
    j = np.arange(1, n + 1, dtype=float)
    if law == "geometric":
        return s ** (-j)
    if law == "power":
        return j ** (-s)
    raise ValueError(f"unknown decay law {law!r}")


def graph_cosine_noise(g: GraphSkeleton, grid: GraphGrid, lambdas: Sequence[float],
                       trace_bound: float = 1e6) -> NoiseModel:
    """Orthonormalize graph cosines on ``grid`` (modified Gram-Schmidt, twice)."""
    lambdas = np.asarray(lambdas, dtype=float)
    if np.any(np.diff(np.abs(lambdas)) > 0):
        raise ValueError("lambda_j must be non-increasing in modulus")
    if np.sum(lambdas ** 2) > trace_bound:
        raise ValueError("noise is not trace class within the configured bound")
    n = lambdas.size
    max_m = max(1, int(math.ceil(n / len(g.edges))) + 1)
    fam = CosineFamily(tuple((e.edge_id, e.x_lo, e.x_hi) for e in g.edges), max_m)
    cand = fam.evaluate(grid.edge, grid.x)
    w = grid.weight
    basis, coeffs = [], []
    for c in range(cand.shape[0]):
        v = cand[c].copy()
        co = np.zeros(cand.shape[0])
        co[c] = 1.0
        for _ in range(2):
            for b, bc in zip(basis, coeffs):
                p = np.sum(w * v * b)
                v -= p * b
                co -= p * bc
        nrm = math.sqrt(np.sum(w * v * v))
        if nrm < 1e-8 * math.sqrt(np.sum(w * cand[c] ** 2)):
            continue
        basis.append(v / nrm)
        coeffs.append(co / nrm)
        if len(basis) == n:
            break
    if len(basis) < n:
        raise ValueError("not enough independent cosine modes; raise the family size")
    return NoiseModel(lambdas, np.array(coeffs), fam)


@dataclass(frozen=True)
class LiftedNoise:
    """Channel noise ``Q = A^v``: mode ``j`` is ``f_j`` lifted along cross-sections."""

    noise: NoiseModel
    grid: ProductGrid
    graph_modes: np.ndarray

    def increment(self, dbeta) -> np.ndarray:
        return vee(self.noise.increment(self.graph_modes, dbeta), self.grid)

    def graph_increment(self, dbeta) -> np.ndarray:
        return self.noise.increment(self.graph_modes, dbeta)

    def hs_norm(self) -> float:
        """Hilbert-Schmidt norm of ``Q = A^v`` in the weighted channel space.

        With ``D`` the sample weights and ``V`` the lift, the wedge is
        ``W^-1 V^T D`` so ``D^1/2 Q D^-1/2 = U diag(lambda) U^T`` with
        ``U = D^1/2 V F``; the Frobenius norm follows from the Gram ``U^T U``.
        """
        lifted = vee(self.graph_modes, self.grid)
        G = (lifted * self.grid.weight) @ lifted.T
        lam = self.noise.lambdas
        M = (lam[:, None] * G) * (lam[None, :] * G).T
        return float(math.sqrt(max(np.sum(M), 0.0)))


def lift_noise(noise: NoiseModel, grid: ProductGrid, g: GraphSkeleton | None = None,
               trace_bound: float = 1e6) -> LiftedNoise:
    if float(np.sum(noise.lambdas ** 2)) > trace_bound:
        raise ValueError("noise is not trace class within the configured bound")
    return LiftedNoise(noise, grid, noise.modes_on(grid.graph, g))


def cross_section_average(g: GraphSkeleton, u: Callable, n_y: int = 16) -> Callable:
    """``fn(edge_ids, x)`` returning Gauss-Legendre averages of ``u`` over ``C_k(x)``."""
    t, gw = np.polynomial.legendre.leggauss(n_y)

    def fn(edge_ids, x):
        edge_ids = np.atleast_1d(edge_ids)
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.empty(x.shape)
        for eid in np.unique(edge_ids):
            m = edge_ids == eid
            s = g.edge(int(eid)).strip
            y0, y1 = s.h_lo(x[m]), s.h_hi(x[m])
            ys = 0.5 * (y0 + y1)[:, None] + 0.5 * (y1 - y0)[:, None] * t[None, :]
            out[m] = (u(np.broadcast_to(x[m][:, None], ys.shape), ys) @ gw) / 2.0
        return out

    return fn
