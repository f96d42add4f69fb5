"""Planar domains built from glued strips.

A domain ``G`` is described by its strip (Reeb) decomposition: each strip is
``{(x, y) : x_lo <= x <= x_hi, h_lo(x) <= y <= h_hi(x)}`` and strips are
glued at finitely many vertex abscissae.  Each strip becomes one edge of the
identification graph, each merge group at a vertex abscissa becomes one
interior vertex, and every free strip end becomes an exterior vertex.

Only the ``h_lo``/``h_hi`` curves and the uncovered parts of strip ends
(vertical walls) reflect; interfaces between glued strips are transparent.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BOUNDARY_TOL = 1e-12
MAX_CORRECTIONS = 8
CORNER_MARGIN = 0.05


class DomainError(ValueError):
    """Raised when a domain description violates the strip-complex rules."""


class ReflectionError(RuntimeError):
    """Raised when the boundary correction does not converge (step too large)."""


@dataclass(frozen=True)
class HFunction:
    """``sum_i poly[i] x**i + sum (a sin(b x + c))`` with analytic derivatives."""

    poly: tuple[float, ...] = (0.0,)
    sines: tuple[tuple[float, float, float], ...] = ()

    def __call__(self, x):
        return self.derivative(x, 0)

    def derivative(self, x, order: int = 1):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        coeffs = np.asarray(self.poly, dtype=float)
        for _ in range(order):
            coeffs = coeffs[1:] * np.arange(1, len(coeffs))
        if coeffs.size:
            out = out + np.polynomial.polynomial.polyval(x, coeffs)
        for a, b, c in self.sines:
            # d^n/dx^n sin(bx + c) = b^n sin(bx + c + n pi/2)
            out = out + a * b**order * np.sin(b * x + c + order * math.pi / 2)
        return out

    def to_dict(self) -> dict:
        return {"poly": list(self.poly), "sin": [list(s) for s in self.sines]}

    @classmethod
    def from_dict(cls, d) -> "HFunction":
        if isinstance(d, (int, float)):
            return cls(poly=(float(d),))
        poly = tuple(float(c) for c in d.get("poly", [0.0])) or (0.0,)
        sines = tuple(tuple(float(v) for v in s) for s in d.get("sin", []))
        for s in sines:
            if len(s) != 3:
                raise DomainError(f"sine term must be [a, b, c], got {list(s)}")
        return cls(poly=poly, sines=sines)


@dataclass(frozen=True)
class Strip:
    edge_id: int
    x_lo: float
    x_hi: float
    h_lo: HFunction
    h_hi: HFunction

    def width(self, x):
        return self.h_hi(x) - self.h_lo(x)

    def dwidth(self, x):
        return self.h_hi.derivative(x) - self.h_lo.derivative(x)

    def interval(self, x) -> tuple[float, float]:
        return float(self.h_lo(x)), float(self.h_hi(x))


@dataclass(frozen=True)
class Vertex:
    vertex_id: int
    x: float
    kind: str  # "interior" | "exterior"
    incident: tuple[tuple[int, str], ...]  # (edge_id, "left" | "right")

    @property
    def degree(self) -> int:
        return len(self.incident)


@dataclass(frozen=True)
class Wall:
    """Vertical boundary segment at a strip end.

    ``normal_x`` is +1 on a strip's left end (domain lies to the right) and
    -1 on a right end.
    """

    edge_id: int
    end: str
    x: float
    y_lo: float
    y_hi: float
    normal_x: float


@dataclass(frozen=True)
class GraphPoint:
    x: float
    edge: int | None = None
    vertex: int | None = None

    @property
    def is_vertex(self) -> bool:
        return self.vertex is not None


@dataclass(frozen=True)
class BoundaryPoint:
    strip_id: int
    side: str  # lower | upper | left | right
    x: float
    position: tuple[float, float]
    normal: tuple[float, float]


@dataclass(frozen=True)
class StripComplex:
    strips: tuple[Strip, ...]
    vertices: tuple[Vertex, ...]
    walls: tuple[Wall, ...]
    groups: tuple[dict, ...] = field(default=(), repr=False)

    @property
    def vertex_xs(self) -> list[float]:
        return sorted({v.x for v in self.vertices if v.kind == "interior"})

    def strip(self, edge_id: int) -> Strip:
        for s in self.strips:
            if s.edge_id == edge_id:
                return s
        raise KeyError(f"no strip with id {edge_id}")

    def end_vertex(self, edge_id: int, end: str) -> Vertex:
        for v in self.vertices:
            if (edge_id, end) in v.incident:
                return v
        raise KeyError((edge_id, end))

    @property
    def bounding_box(self) -> tuple[float, float, float, float]:
        x0 = min(s.x_lo for s in self.strips)
        x1 = max(s.x_hi for s in self.strips)
        y0, y1 = math.inf, -math.inf
        for s in self.strips:
            xs = np.linspace(s.x_lo, s.x_hi, 2001)
            y0 = min(y0, float(np.min(s.h_lo(xs))))
            y1 = max(y1, float(np.max(s.h_hi(xs))))
        return x0, x1, y0, y1

    def area(self) -> float:
        from scipy.integrate import quad

        return float(sum(quad(s.width, s.x_lo, s.x_hi, epsabs=0, epsrel=1e-12, limit=200)[0]
                         for s in self.strips))

    def to_dict(self) -> dict:
        return {
            "strips": [
                {"id": s.edge_id, "x_lo": s.x_lo, "x_hi": s.x_hi,
                 "h_lo": s.h_lo.to_dict(), "h_hi": s.h_hi.to_dict()}
                for s in self.strips
            ],
            "vertices": [dict(g) for g in self.groups],
        }

    # vectorized geometry -------------------------------------------------

    def contains(self, x, y, tol: float = BOUNDARY_TOL):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        inside = np.zeros(np.broadcast(x, y).shape, dtype=bool)
        for s in self.strips:
            in_x = (x >= s.x_lo - tol) & (x <= s.x_hi + tol)
            xc = np.clip(x, s.x_lo, s.x_hi)
            inside |= in_x & (y >= s.h_lo(xc) - tol) & (y <= s.h_hi(xc) + tol)
        return inside

    def locate_edge(self, x, y, tol: float = BOUNDARY_TOL):
        """Edge id of the strip holding each point (-1 outside).

        At a vertex abscissa the strip starting there wins over the one ending.
        """
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        out = np.full(np.broadcast(x, y).shape, -1, dtype=int)
        for s in sorted(self.strips, key=lambda s: -s.x_lo):
            in_x = (x >= s.x_lo - tol) & (x <= s.x_hi + tol)
            xc = np.clip(x, s.x_lo, s.x_hi)
            hit = in_x & (y >= s.h_lo(xc) - tol) & (y <= s.h_hi(xc) + tol) & (out < 0)
            out[hit] = s.edge_id
        return out


# construction -----------------------------------------------------------

def _interval_minus(a: tuple[float, float], cover: Iterable[tuple[float, float]],
                    tol: float = 1e-12) -> list[tuple[float, float]]:
    pieces = [a]
    for c0, c1 in cover:
        nxt = []
        for p0, p1 in pieces:
            if c1 <= p0 or c0 >= p1:
                nxt.append((p0, p1))
                continue
            if c0 > p0:
                nxt.append((p0, c0))
            if c1 < p1:
                nxt.append((c1, p1))
        pieces = nxt
    return [(p0, p1) for p0, p1 in pieces if p1 - p0 > tol]


def _union_connected(intervals: Sequence[tuple[float, float]], tol: float = 1e-12) -> bool:
    ivs = sorted(intervals)
    hi = ivs[0][1]
    for a, b in ivs[1:]:
        if a > hi + tol:
            return False
        hi = max(hi, b)
    return True


def build_strip_complex(spec: dict, samples: int = 1000) -> StripComplex:
    """Validate a domain description and return the strip complex.

    ``spec`` has ``strips`` (``id``, ``x_lo``, ``x_hi``, ``h_lo``, ``h_hi``)
    and ``vertices``, a list of merge groups ``{"x", "left", "right"}`` naming
    strips that end (``left``) or start (``right``) at ``x`` and are glued.
    """
    raw_strips = spec.get("strips") or []
    if not raw_strips:
        raise DomainError("domain has no strips")
    strips = []
    seen = set()
    for i, d in enumerate(raw_strips):
        sid = int(d.get("id", i))
        if sid in seen:
            raise DomainError(f"duplicate strip id {sid}")
        seen.add(sid)
        s = Strip(sid, float(d["x_lo"]), float(d["x_hi"]),
                  HFunction.from_dict(d["h_lo"]), HFunction.from_dict(d["h_hi"]))
        if not s.x_hi > s.x_lo:
            raise DomainError(f"strip {sid}: x_hi must exceed x_lo")
        closed = np.linspace(s.x_lo, s.x_hi, samples)
        for fn in (s.h_lo, s.h_hi):
            for order in (0, 1, 2):
                if not np.all(np.isfinite(fn.derivative(closed, order))):
                    raise DomainError(f"strip {sid}: non-finite boundary function")
        interior = closed[1:-1]
        if np.any(s.width(interior) <= 0):
            raise DomainError(f"strip {sid}: width h_hi - h_lo must be positive inside the strip")
        strips.append(s)

    by_id = {s.edge_id: s for s in strips}

    # strips sharing an open x-range must be vertically separated
    for i, a in enumerate(strips):
        for b in strips[i + 1:]:
            lo, hi = max(a.x_lo, b.x_lo), min(a.x_hi, b.x_hi)
            if hi <= lo:
                continue
            xs = np.linspace(lo, hi, samples)[1:-1]
            gap = np.maximum(b.h_lo(xs) - a.h_hi(xs), a.h_lo(xs) - b.h_hi(xs))
            if np.any(gap <= BOUNDARY_TOL):
                raise DomainError(f"strips {a.edge_id} and {b.edge_id} overlap")

    groups = []
    used: set[tuple[int, str]] = set()
    for g in spec.get("vertices", []) or []:
        x = float(g["x"])
        left = [int(v) for v in g.get("left", [])]
        right = [int(v) for v in g.get("right", [])]
        for sid in left + right:
            if sid not in by_id:
                raise DomainError(f"vertex at x={x}: unknown strip {sid}")
        for sid in left:
            if abs(by_id[sid].x_hi - x) > 1e-12:
                raise DomainError(f"vertex at x={x}: strip {sid} does not end there")
            if (sid, "right") in used:
                raise DomainError(f"strip {sid} right end used twice")
            used.add((sid, "right"))
        for sid in right:
            if abs(by_id[sid].x_lo - x) > 1e-12:
                raise DomainError(f"vertex at x={x}: strip {sid} does not start there")
            if (sid, "left") in used:
                raise DomainError(f"strip {sid} left end used twice")
            used.add((sid, "left"))
        if not left and not right:
            raise DomainError(f"vertex at x={x} has no strips")
        groups.append({"x": x, "left": left, "right": right})

    vertices: list[Vertex] = []
    walls: list[Wall] = []
    for g in groups:
        x = g["x"]
        left_iv = {sid: by_id[sid].interval(x) for sid in g["left"]}
        right_iv = {sid: by_id[sid].interval(x) for sid in g["right"]}
        if len(left_iv) + len(right_iv) > 1:
            if not _union_connected(list(left_iv.values()) + list(right_iv.values())):
                raise DomainError(f"vertex at x={x}: glued strip ends are not connected")
            if left_iv and right_iv:
                for sid, iv in left_iv.items():
                    if not any(min(iv[1], r[1]) - max(iv[0], r[0]) > -1e-12 for r in right_iv.values()):
                        raise DomainError(f"vertex at x={x}: strip {sid} touches no strip across")
        left_walls = [(sid, w) for sid, iv in left_iv.items()
                      for w in _interval_minus(iv, right_iv.values())]
        right_walls = [(sid, w) for sid, iv in right_iv.items()
                       for w in _interval_minus(iv, left_iv.values())]
        if left_walls and right_walls and len(left_iv) + len(right_iv) > 1:
            raise DomainError(
                f"vertex at x={x}: boundary normals at nu_2 = 0 points have both signs of nu_1")
        for sid, (y0, y1) in left_walls:
            walls.append(Wall(sid, "right", x, y0, y1, -1.0))
        for sid, (y0, y1) in right_walls:
            walls.append(Wall(sid, "left", x, y0, y1, 1.0))
        incident = tuple([(sid, "right") for sid in g["left"]] + [(sid, "left") for sid in g["right"]])
        kind = "interior" if len(incident) > 1 else "exterior"
        vertices.append(Vertex(len(vertices), x, kind, incident))

    # other strips ending at a group abscissa must not touch the group
    for g in groups:
        x = g["x"]
        members = set(g["left"]) | set(g["right"])
        ivs = [by_id[s].interval(x) for s in members]
        lo, hi = min(i[0] for i in ivs), max(i[1] for i in ivs)
        for s in strips:
            if s.edge_id in members or not (s.x_lo - 1e-12 <= x <= s.x_hi + 1e-12):
                continue
            a, b = s.interval(x)
            if min(b, hi) - max(a, lo) > -1e-12 and abs(s.x_lo - x) > 1e-12 and abs(s.x_hi - x) > 1e-12:
                raise DomainError(f"strip {s.edge_id} crosses the vertex at x={x}")

    for s in strips:
        for end, x, nx in (("left", s.x_lo, 1.0), ("right", s.x_hi, -1.0)):
            if (s.edge_id, end) in used:
                continue
            y0, y1 = s.interval(x)
            if y1 - y0 > BOUNDARY_TOL:
                walls.append(Wall(s.edge_id, end, x, y0, y1, nx))
            vertices.append(Vertex(len(vertices), x, "exterior", ((s.edge_id, end),)))

    return StripComplex(tuple(strips), tuple(vertices), tuple(walls), tuple(groups))


def load_domain(path) -> StripComplex:
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        import tomli

        spec = tomli.loads(text)
    else:
        spec = json.loads(text)
    return build_strip_complex(spec)


def save_domain(sc: StripComplex, path) -> None:
    # json float repr round-trips exactly
    Path(path).write_text(json.dumps(sc.to_dict(), indent=2))


# standard domains ---------------------------------------------------------

def sine_strip(length: float = 2 * math.pi) -> StripComplex:
    """One strip ``0 <= y <= 2 + sin x`` on ``[0, length]``."""
    return build_strip_complex({"strips": [
        {"id": 1, "x_lo": 0.0, "x_hi": length, "h_lo": {"poly": [0.0]},
         "h_hi": {"poly": [2.0], "sin": [[1.0, 1.0, 0.0]]}}]})


def rectangle(x_lo=0.0, x_hi=1.0, y_lo=0.0, y_hi=1.0) -> StripComplex:
    return build_strip_complex({"strips": [
        {"id": 1, "x_lo": x_lo, "x_hi": x_hi, "h_lo": {"poly": [y_lo]}, "h_hi": {"poly": [y_hi]}}]})


def fork() -> StripComplex:
    """A = [0,1]x[0,1] splitting into B = [1,2]x[0,0.4] and C = [1,2]x[0.6,1]."""
    return build_strip_complex({
        "strips": [
            {"id": 0, "x_lo": 0.0, "x_hi": 1.0, "h_lo": {"poly": [0.0]}, "h_hi": {"poly": [1.0]}},
            {"id": 1, "x_lo": 1.0, "x_hi": 2.0, "h_lo": {"poly": [0.0]}, "h_hi": {"poly": [0.4]}},
            {"id": 2, "x_lo": 1.0, "x_hi": 2.0, "h_lo": {"poly": [0.6]}, "h_hi": {"poly": [1.0]}},
        ],
        "vertices": [{"x": 1.0, "left": [0], "right": [1, 2]}],
    })


def sloped_fork() -> StripComplex:
    """Fork with x-dependent widths; widths 1, 0.4, 0.4 at the vertex x = 1."""
    return build_strip_complex({
        "strips": [
            {"id": 0, "x_lo": 0.0, "x_hi": 1.0, "h_lo": {"poly": [0.0]}, "h_hi": {"poly": [0.7, 0.3]}},
            {"id": 1, "x_lo": 1.0, "x_hi": 2.0, "h_lo": {"poly": [0.0]}, "h_hi": {"poly": [0.2, 0.2]}},
            {"id": 2, "x_lo": 1.0, "x_hi": 2.0, "h_lo": {"poly": [0.5, 0.1]}, "h_hi": {"poly": [0.7, 0.3]}},
        ],
        "vertices": [{"x": 1.0, "left": [0], "right": [1, 2]}],
    })


# queries ------------------------------------------------------------------

def cross_section(sc: StripComplex, x: float) -> list[tuple[int, tuple[float, float], float]]:
    """Connected components of ``{y : (x, y) in G}`` as ``(edge_id, (y_lo, y_hi), length)``.

    At a vertex abscissa every strip whose closed range contains ``x``
    reports its own end interval.
    """
    out = []
    for s in sc.strips:
        if s.x_lo - BOUNDARY_TOL <= x <= s.x_hi + BOUNDARY_TOL:
            xc = min(max(x, s.x_lo), s.x_hi)
            y0, y1 = s.interval(xc)
            out.append((s.edge_id, (y0, y1), y1 - y0))
    out.sort(key=lambda c: c[1][0])
    return out


def contains(sc: StripComplex, p) -> bool:
    return bool(sc.contains(p[0], p[1]))


def curve_normal(strip: Strip, side: str, x):
    """Unit inward normal on the lower (``h_lo``) or upper (``h_hi``) curve."""
    if side == "lower":
        d = strip.h_lo.derivative(x)
        n = 1.0 / np.sqrt(1.0 + d * d)
        return -d * n, n
    if side == "upper":
        d = strip.h_hi.derivative(x)
        n = 1.0 / np.sqrt(1.0 + d * d)
        return d * n, -n
    raise ValueError(side)


def boundary_normal(sc: StripComplex, strip_id: int, side: str, x: float,
                    y: float | None = None) -> BoundaryPoint:
    s = sc.strip(strip_id)
    if side in ("lower", "upper"):
        if not (s.x_lo - BOUNDARY_TOL <= x <= s.x_hi + BOUNDARY_TOL):
            raise ValueError(f"x={x} outside strip {strip_id}")
        n1, n2 = curve_normal(s, side, x)
        yb = float(s.h_lo(x) if side == "lower" else s.h_hi(x))
        return BoundaryPoint(strip_id, side, float(x), (float(x), yb), (float(n1), float(n2)))
    if side in ("left", "right"):
        xe = s.x_lo if side == "left" else s.x_hi
        if y is None:
            y = 0.5 * sum(s.interval(xe))
        for w in sc.walls:
            if w.edge_id == strip_id and w.end == side and w.y_lo - BOUNDARY_TOL <= y <= w.y_hi + BOUNDARY_TOL:
                return BoundaryPoint(strip_id, side, xe, (xe, float(y)), (w.normal_x, 0.0))
        raise ValueError(f"strip {strip_id} {side} end at y={y} is an interior interface")
    raise ValueError(f"unknown side {side!r}")


def project_to_graph(sc: StripComplex, p) -> GraphPoint:
    x, y = float(p[0]), float(p[1])
    if not contains(sc, (x, y)):
        raise ValueError(f"point {p} is outside the domain")
    for v in sc.vertices:
        if abs(x - v.x) > BOUNDARY_TOL:
            continue
        for sid, end in v.incident:
            s = sc.strip(sid)
            y0, y1 = s.interval(s.x_lo if end == "left" else s.x_hi)
            if y0 - BOUNDARY_TOL <= y <= y1 + BOUNDARY_TOL:
                return GraphPoint(x=v.x, vertex=v.vertex_id)
    edge = int(sc.locate_edge(x, y))
    return GraphPoint(x=x, edge=edge)


# Skorokhod correction -----------------------------------------------------

def _solve_curve(strip: Strip, side: str, x0, y0, sx: float, sy: float, iters: int = 6):
    """Push ``(x0, y0)`` along ``sigma nu`` onto a curve; returns (d, xb, xl, yl).

    ``d`` is the multiplier of ``sigma nu(xb)`` and ``(xl, yl)`` the landing
    point.  Fixed point on the foot ``xb`` with an inner Newton on ``d``.
    """
    h = strip.h_lo if side == "lower" else strip.h_hi
    xb = np.clip(x0, strip.x_lo, strip.x_hi)
    d = np.zeros_like(x0)
    for _ in range(iters):
        n1, n2 = curve_normal(strip, side, xb)
        v1, v2 = sx * n1, sy * n2
        for _ in range(4):
            xs = x0 + v1 * d
            g = y0 + v2 * d - h(xs)
            dg = v2 - v1 * h.derivative(xs)
            d = d - g / dg
        xb_new = x0 + v1 * d
        done = np.all(np.abs(xb_new - xb) <= 1e-15 * (1.0 + np.abs(xb)))
        xb = xb_new
        if done:
            break
    n1, n2 = curve_normal(strip, side, xb)
    return d, xb, x0 + sx * n1 * d, y0 + sy * n2 * d, n1, n2


def _candidates(sc: StripComplex, x0, y0, sx, sy):
    """Every face correction for the batch; rows = faces."""
    cands = []
    for s in sc.strips:
        # faces are extended slightly past their ends so corner overshoots
        # can be corrected one face at a time
        tol = CORNER_MARGIN * (s.x_hi - s.x_lo)
        for side in ("lower", "upper"):
            d, xb, xl, yl, n1, n2 = _solve_curve(s, side, x0, y0, sx, sy)
            ok = np.isfinite(d) & (d >= -1e-14) & (xb >= s.x_lo - tol) & (xb <= s.x_hi + tol)
            cands.append((np.maximum(d, 0.0), xl, yl, n1, n2, ok, (s.edge_id, side), xb))
    for w in sc.walls:
        tol = CORNER_MARGIN * (w.y_hi - w.y_lo)
        d = (w.x - x0) * w.normal_x / sx
        ok = (d >= -1e-14) & (y0 >= w.y_lo - tol) & (y0 <= w.y_hi + tol)
        xl = np.full_like(x0, w.x)
        zeros = np.zeros_like(x0)
        cands.append((np.maximum(d, 0.0), xl, y0.copy(), zeros + w.normal_x, zeros, ok,
                      (w.edge_id, w.end), xl))
    return cands


def reflect_batch(sc: StripComplex, x, y, sx: float, sy: float, strict: bool = True):
    """Vectorized Skorokhod correction of points outside the closed domain.

    Returns ``(x_in, y_in, dphi, face, foot_x, normal_x, normal_y)``; ``face``
    indexes :func:`face_labels`.  Points already inside are returned
    unchanged with ``dphi = 0``.  With ``strict=False`` a boolean mask of
    points that could not be corrected is appended instead of raising.
    """
    x = np.array(x, dtype=float, copy=True)
    y = np.array(y, dtype=float, copy=True)
    n = x.shape[0]
    dphi = np.zeros(n)
    face = np.full(n, -1, dtype=int)
    foot = x.copy()
    nx = np.zeros(n)
    ny = np.zeros(n)
    failed = np.zeros(n, dtype=bool)
    x0_all, y0_all = x.copy(), y.copy()
    todo = np.nonzero(~sc.contains(x, y))[0]
    parked = []  # points no single face can absorb; left to the corner rule
    for _ in range(MAX_CORRECTIONS):
        if todo.size == 0:
            break
        cands = _candidates(sc, x[todo], y[todo], sx, sy)
        D = np.stack([c[0] for c in cands])
        OK = np.stack([c[5] for c in cands])
        XL = np.stack([c[1] for c in cands])
        YL = np.stack([c[2] for c in cands])
        # greedy: the applicable face with the shortest Euclidean push
        push = np.hypot(XL - x[todo], YL - y[todo])
        push = np.where(OK & (push > 0.0), push, np.inf)
        pick = np.argmin(push, axis=0)
        cols = np.arange(todo.size)
        stuck = ~np.isfinite(push[pick, cols])
        if np.any(stuck):
            parked.append(todo[stuck])
            todo, pick, D, XL, YL = todo[~stuck], pick[~stuck], D[:, ~stuck], XL[:, ~stuck], YL[:, ~stuck]
            cands = [tuple(np.asarray(c[k])[..., ~stuck] if k != 6 else c[k] for k in range(8))
                     for c in cands]
            cols = np.arange(todo.size)
        x[todo] = XL[pick, cols]
        y[todo] = YL[pick, cols]
        dphi[todo] += D[pick, cols]
        face[todo] = pick
        foot[todo] = np.stack([c[7] for c in cands])[pick, cols]
        nx[todo] = np.stack([c[3] for c in cands])[pick, cols]
        ny[todo] = np.stack([c[4] for c in cands])[pick, cols]
        still = ~sc.contains(x[todo], y[todo])
        todo = todo[still]
    todo = np.concatenate([todo, *parked]).astype(int)
    if todo.size:
        todo = _snap_to_corner(sc, todo, x0_all, y0_all, x, y, dphi, face, foot, nx, ny, sx, sy)
    if todo.size:
        if strict:
            raise ReflectionError("corner correction did not converge; shrink dt")
        failed[todo] = True
    if strict:
        return x, y, dphi, face, foot, nx, ny
    return x, y, dphi, face, foot, nx, ny, failed


def _convex_corners(sc: StripComplex) -> list[tuple[float, float, float, float, float, float]]:
    """Wall end points where the domain angle is below pi: ``(cx, cy, n_wall, n_curve)``.

    Normals are inward.  Reflex corners (e.g. a notch between branches) are
    skipped; there the Skorokhod image of a nearby outside point is never the
    corner itself.
    """
    out = []
    delta = 1e-7
    for w in sc.walls:
        for cy in (w.y_lo, w.y_hi):
            for s in sc.strips:
                if not (abs(s.x_lo - w.x) <= BOUNDARY_TOL or abs(s.x_hi - w.x) <= BOUNDARY_TOL):
                    continue
                for side in ("lower", "upper"):
                    h = s.h_lo if side == "lower" else s.h_hi
                    if abs(float(h(w.x)) - cy) > 1e-9:
                        continue
                    n1, n2 = (float(v) for v in curve_normal(s, side, w.x))
                    mixed = np.array([[w.x + delta * (w.normal_x - n1), cy - delta * n2],
                                      [w.x + delta * (n1 - w.normal_x), cy + delta * n2]])
                    if not np.any(sc.contains(mixed[:, 0], mixed[:, 1], tol=0.0)):
                        out.append((w.x, cy, w.normal_x, 0.0, n1, n2))
    return out


def _snap_to_corner(sc, todo, x0, y0, x, y, dphi, face, foot, nx, ny, sx, sy):
    """Exact corner rule for overshoots that face corrections cannot resolve.

    At a convex corner ``c`` the Skorokhod image of ``p`` is ``c`` itself iff
    ``c - p = a sigma n_wall + b sigma n_curve`` with ``a, b >= 0``; the local
    time increment is then ``a + b``.  Alternating face corrections cycle in
    that cone, and the extended faces need not cover it at all.
    """
    best = np.full(todo.size, np.inf)
    hit = np.full((todo.size, 2), np.nan)
    px, py = x0[todo], y0[todo]
    for cx, cy, w1, w2, c1, c2 in _convex_corners(sc):
        M = np.array([[sx * w1, sx * c1], [sy * w2, sy * c2]])
        if abs(np.linalg.det(M)) <= 1e-14 * np.abs(M).max() ** 2:
            continue
        ab = np.linalg.solve(M, np.stack([cx - px, cy - py]))
        tol = 1e-12 * (1.0 + np.abs(ab).max(axis=0))
        ok = np.all(ab >= -tol, axis=0) & (ab.sum(axis=0) < best)
        best[ok] = ab.sum(axis=0)[ok]
        hit[ok] = (cx, cy)
    ok = np.isfinite(best)
    idx = todo[ok]
    cx, cy = hit[ok, 0], hit[ok, 1]
    dx, dy = cx - x0[idx], cy - y0[idx]
    r = np.maximum(np.hypot(dx, dy), 1e-300)
    x[idx], y[idx] = cx, cy
    dphi[idx] = np.maximum(best[ok], 0.0)
    nx[idx], ny[idx], foot[idx] = dx / r, dy / r, cx
    return todo[~ok]


def face_labels(sc: StripComplex) -> list[tuple[int, str]]:
    labels = [(s.edge_id, side) for s in sc.strips for side in ("lower", "upper")]
    labels += [(w.edge_id, w.end) for w in sc.walls]
    return labels


def reflect_into_domain(sc: StripComplex, p_out, eps: float = 1.0,
                        sigma: tuple[float, float] | None = None):
    """Skorokhod correction of one point along ``sigma nu``.

    ``sigma`` is the diagonal ``(1, eps**-2)`` unless given.  Returns
    ``(p_in, boundary_point, dphi)`` with ``dphi`` the multiplier of
    ``sigma nu`` (the local-time increment).
    """
    sx, sy = sigma if sigma is not None else (1.0, eps ** -2)
    xi, yi, d, f, foot, n1, n2 = reflect_batch(sc, np.array([p_out[0]], float),
                                               np.array([p_out[1]], float), sx, sy)
    if f[0] < 0:
        return (float(xi[0]), float(yi[0])), None, 0.0
    sid, side = face_labels(sc)[f[0]]
    bp = BoundaryPoint(sid, side, float(foot[0]), (float(xi[0]), float(yi[0])),
                       (float(n1[0]), float(n2[0])))
    return (float(xi[0]), float(yi[0])), bp, float(d[0])
