import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from channelgraph.geometry import (DomainError, boundary_normal, build_strip_complex, contains,
                                   cross_section, curve_normal, fork, load_domain, project_to_graph,
                                   rectangle, reflect_batch, reflect_into_domain, save_domain,
                                   sine_strip, sloped_fork)


def test_single_strip_structure():
    sc = sine_strip()
    assert len(sc.strips) == 1
    assert len(sc.vertices) == 2
    assert all(v.degree == 1 for v in sc.vertices)


def test_fork_has_one_interior_vertex_of_degree_three():
    sc = fork()
    degrees = sorted(v.degree for v in sc.vertices)
    assert degrees == [1, 1, 1, 3]


def test_zero_width_strip_rejected():
    with pytest.raises(DomainError):
        build_strip_complex({"strips": [{"id": 0, "x_lo": 0, "x_hi": 1, "h_lo": {"poly": [1.0]},
                                         "h_hi": {"poly": [1.0]}}]})


def test_overlapping_strips_rejected():
    with pytest.raises(DomainError):
        build_strip_complex({"strips": [
            {"id": 0, "x_lo": 0, "x_hi": 1, "h_lo": {"poly": [0.0]}, "h_hi": {"poly": [1.0]}},
            {"id": 1, "x_lo": 0.5, "x_hi": 1.5, "h_lo": {"poly": [0.5]}, "h_hi": {"poly": [2.0]}}]})


@pytest.mark.parametrize("sc, x, expected", [
    (sine_strip(), math.pi / 2, [(0.0, 3.0)]),
    (fork(), 1.5, [(0.0, 0.4), (0.6, 1.0)]),
    (fork(), 0.5, [(0.0, 1.0)]),
])
def test_cross_section(sc, x, expected):
    comps = cross_section(sc, x)
    assert [c[1] for c in comps] == pytest.approx(expected)
    assert [c[2] for c in comps] == pytest.approx([b - a for a, b in expected])


@pytest.mark.parametrize("sc, p, inside", [
    (sine_strip(), (math.pi / 2, 1.5), True),
    (sine_strip(), (math.pi / 2, 3.1), False),
    (fork(), (1.5, 0.5), False),
    (fork(), (1.0, 0.5), True),
])
def test_contains(sc, p, inside):
    assert contains(sc, p) is inside


def test_normals():
    flat = rectangle().strips[0]
    assert curve_normal(flat, "lower", 0.3) == pytest.approx((0.0, 1.0))
    s = sine_strip().strips[0]
    assert curve_normal(s, "upper", 0.0) == pytest.approx((1 / math.sqrt(2), -1 / math.sqrt(2)))


def test_sloped_lower_normal_points_inward():
    sc = build_strip_complex({"strips": [{"id": 0, "x_lo": 0, "x_hi": 1, "h_lo": {"poly": [1.0, -1.0]},
                                          "h_hi": {"poly": [3.0]}}]})
    bp = boundary_normal(sc, 0, "lower", 0.5)
    assert bp.normal == pytest.approx((1 / math.sqrt(2), 1 / math.sqrt(2)))
    x, y = bp.position
    assert contains(sc, (x + 0.01 * bp.normal[0], y + 0.01 * bp.normal[1]))


def test_wall_normals_point_inward():
    sc = fork()
    bp = boundary_normal(sc, 0, "left", 0.0, 0.5)
    assert bp.normal == (1.0, 0.0)
    bp = boundary_normal(sc, 1, "right", 2.0, 0.2)
    assert bp.normal == (-1.0, 0.0)


@pytest.mark.parametrize("sc, p, edge, vertex", [
    (sine_strip(), (1.0, 0.7), 1, None),
    (fork(), (1.5, 0.2), 1, None),
    (fork(), (1.0, 0.5), None, 1),
])
def test_project_to_graph(sc, p, edge, vertex):
    gp = project_to_graph(sc, p)
    if vertex is None:
        assert gp.edge == edge and gp.x == pytest.approx(p[0])
    else:
        assert gp.is_vertex


@pytest.mark.parametrize("eps, dphi", [(1.0, 0.01), (0.1, 1e-4)])
def test_reflect_flat_bottom(eps, dphi):
    p_in, bp, d = reflect_into_domain(rectangle(), (0.5, -0.01), eps)
    assert p_in == pytest.approx((0.5, 0.0), abs=1e-14)
    assert bp.side == "lower"
    assert d == pytest.approx(dphi, rel=1e-12)


def test_reflect_sloped_upper_matches_root_find():
    # h_hi' = 1 at x = 0 for 2 + sin(x); exit point slightly above
    sc = sine_strip()
    p_out = (0.3, 2 + math.sin(0.3) + 0.02)
    p_in, bp, d = reflect_into_domain(sc, p_out, 1.0)
    s = sc.strips[0]

    def landing(xb):
        n1, n2 = curve_normal(s, "upper", xb)
        # d solves p_out + d n on the curve for a given foot xb; foot must equal landing x
        dd = brentq(lambda t: p_out[1] + t * n2 - s.h_hi(p_out[0] + t * n1), 0, 1)
        return p_out[0] + dd * n1 - xb, dd

    xb = brentq(lambda z: landing(z)[0], 0.0, 0.6)
    assert d == pytest.approx(landing(xb)[1], rel=1e-8)
    assert p_in[1] == pytest.approx(s.h_hi(p_in[0]), abs=1e-12)


def test_interior_point_not_moved():
    p_in, bp, d = reflect_into_domain(fork(), (0.5, 0.5), 0.3)
    assert p_in == (0.5, 0.5) and bp is None and d == 0.0


@settings(max_examples=300, deadline=None)
@given(st.floats(-0.05, 2.05), st.floats(-0.05, 1.05), st.sampled_from([1.0, 0.5, 0.1]))
def test_reflection_lands_in_domain_or_reports_failure(x, y, eps):
    sc = fork()
    out = reflect_batch(sc, np.array([x]), np.array([y]), 1.0, eps ** -2, strict=False)
    xi, yi, d, failed = out[0], out[1], out[2], out[-1]
    if not failed[0]:
        assert bool(sc.contains(xi[0], yi[0], tol=1e-9))
        assert d[0] >= 0
    if bool(sc.contains(x, y)):
        assert (xi[0], yi[0], d[0]) == (x, y, 0.0)


def test_domain_round_trip(tmp_path):
    sc = sloped_fork()
    save_domain(sc, tmp_path / "d.json")
    back = load_domain(tmp_path / "d.json")
    assert back.to_dict() == sc.to_dict()
    (tmp_path / "d.toml").write_text(
        '[[strips]]\nid = 0\nx_lo = 0.0\nx_hi = 1.0\nh_lo = {poly = [0.0]}\nh_hi = {poly = [1.0]}\n')
    assert load_domain(tmp_path / "d.toml").area() == pytest.approx(1.0)


def test_area_of_sine_strip():
    assert sine_strip().area() == pytest.approx(4 * math.pi, rel=1e-12)


def test_corner_cone_maps_to_corner():
    # c - p = a sigma n_wall + b sigma n_curve with a, b >= 0 -> image is c, dphi = a + b
    sc = rectangle()
    sx, sy = 1.0, 4.0
    x, y, d, *_ = reflect_batch(sc, np.array([-0.1, 1.3]), np.array([-0.2, 1.8]), sx, sy)
    assert np.array_equal(x, [0.0, 1.0]) and np.array_equal(y, [0.0, 1.0])
    assert d == pytest.approx([0.1 + 0.2 / 4, 0.3 + 0.8 / 4], rel=1e-12)


def test_acute_corner_is_resolved():
    # the upper right corner of the sine strip has a 45 degree opening
    sc = sine_strip()
    cx, cy = 2 * math.pi, 2 + math.sin(2 * math.pi)
    rng = np.random.default_rng(0)
    p = np.array([cx, cy]) + 0.3 * rng.standard_normal((2000, 2))
    x, y, d, *_ = reflect_batch(sc, p[:, 0], p[:, 1], 1.0, 1.0)
    assert np.all(sc.contains(x, y, tol=1e-9)) and np.all(d >= 0)
    beyond = (p[:, 0] > cx) & (p[:, 1] > cy + (p[:, 0] - cx))  # polar cone of the corner
    assert np.all((x[beyond] == cx) & (y[beyond] == cy))
