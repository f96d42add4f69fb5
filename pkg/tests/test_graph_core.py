import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.integrate import dblquad

from channelgraph.geometry import GraphPoint, build_strip_complex, fork, sine_strip, sloped_fork
from channelgraph.graph_core import (build_graph, cross_section_average, gauss_product_grid,
                                     graph_cosine_noise, graph_distance, lift_noise, measure_nu,
                                     rescale_J, simpson_grid, split_K1_K2, vee, wedge, wedge_callable)


@pytest.fixture(scope="module")
def fork_grids():
    g = build_graph(fork())
    gg = simpson_grid(g, 32)
    return g, gg, gauss_product_grid(g, gg)


def test_graph_structure():
    g = build_graph(sine_strip())
    assert len(g.edges) == 1 and len(g.vertices) == 2
    g = build_graph(fork())
    assert len(g.edges) == 3
    assert [v.degree for v in g.interior_vertices] == [3]
    assert sum(v.degree == 1 for v in g.vertices) == 3


def test_disconnected_rejected():
    spec = {"strips": [
        {"id": 0, "x_lo": 0, "x_hi": 1, "h_lo": {"poly": [0.0]}, "h_hi": {"poly": [1.0]}},
        {"id": 1, "x_lo": 2, "x_hi": 3, "h_lo": {"poly": [0.0]}, "h_hi": {"poly": [1.0]}}]}
    with pytest.raises(ValueError):
        build_graph(build_strip_complex(spec))


def test_graph_distance():
    g = build_graph(sine_strip())
    assert graph_distance(g, GraphPoint(0.2, edge=1), GraphPoint(0.7, edge=1)) == pytest.approx(0.5)
    assert graph_distance(g, GraphPoint(0.2, edge=1), GraphPoint(0.2, edge=1)) == 0.0
    g = build_graph(fork())
    assert graph_distance(g, GraphPoint(0.5, edge=0), GraphPoint(1.5, edge=1)) == pytest.approx(1.0)
    assert graph_distance(g, GraphPoint(1.5, edge=1), GraphPoint(1.5, edge=2)) == pytest.approx(1.0)


def test_measure_nu():
    g = build_graph(sine_strip())
    assert measure_nu(g) == pytest.approx(4 * math.pi, rel=1e-12)
    assert measure_nu(g, []) == 0.0


@pytest.mark.parametrize("make", [fork, sloped_fork])
def test_measure_equals_area_by_2d_quadrature(make):
    sc = make()
    area = sum(dblquad(lambda y, x: 1.0, s.x_lo, s.x_hi, s.h_lo, s.h_hi)[0] for s in sc.strips)
    assert measure_nu(build_graph(sc)) == pytest.approx(area, rel=1e-10)


def test_cross_section_average_examples():
    sc = sine_strip()
    g = build_graph(sc)
    x = np.linspace(0, 2 * math.pi, 7)
    e = np.ones_like(x, dtype=int)
    assert cross_section_average(g, lambda x, y: 3.0 + 0 * x)(e, x) == pytest.approx(3.0)
    assert cross_section_average(g, lambda x, y: y)(e, x) == pytest.approx((2 + np.sin(x)) / 2)
    g = build_graph(fork())
    f = cross_section_average(g, lambda x, y: (y > 0.5).astype(float))
    assert f(np.array([1, 1]), np.array([1.2, 1.8])) == pytest.approx([0.0, 0.0])


def test_wedge_vee_examples(fork_grids):
    g, gg, pg = fork_grids
    assert np.array_equal(vee(np.ones(gg.size), pg), np.ones(pg.size))
    u = 2.5 * np.ones(pg.size)
    assert np.array_equal(wedge(u, pg), 2.5 * np.ones(gg.size))
    u1, u2 = split_K1_K2(u, pg)
    assert np.all(u2 == 0)


def test_k2_field_on_flat_bottom_strip():
    sc = sine_strip()
    g = build_graph(sc)
    pg = gauss_product_grid(g, simpson_grid(g, 32))
    u = pg.y - (2 + np.sin(pg.x)) / 2
    u1, u2 = split_K1_K2(u, pg)
    assert np.max(np.abs(u1)) < 1e-14
    assert np.allclose(u2, u)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_averaging_identities(fork_grids, seed):
    g, gg, pg = fork_grids
    rng = np.random.default_rng(seed)
    f = rng.standard_normal(gg.size)
    u = rng.standard_normal(pg.size)
    assert np.max(np.abs(wedge(vee(f, pg), pg) - f)) <= 1e-10
    assert pg.norm(vee(f, pg)) == pytest.approx(gg.norm(f), rel=1e-10)
    assert gg.norm(wedge(u, pg)) <= pg.norm(u) * (1 + 1e-12)
    assert gg.inner(wedge(u, pg), f) == pytest.approx(pg.inner(u, vee(f, pg)), rel=1e-9, abs=1e-12)
    u1, u2 = split_K1_K2(u, pg)
    assert abs(pg.inner(u1, u2)) <= 1e-9 * pg.norm(u) ** 2


def test_wedge_of_smooth_function_is_cross_section_mean():
    sc = sloped_fork()
    g = build_graph(sc)
    pg = gauss_product_grid(g, simpson_grid(g, 16))
    u = lambda x, y: np.cos(x) * y ** 2
    got = wedge_callable(u, pg)
    ref = cross_section_average(g, u)(pg.graph.edge, pg.graph.x)
    assert np.allclose(got, ref, atol=1e-13)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_rescaling(e1, e2):
    g = build_graph(sine_strip())
    pg = gauss_product_grid(g, simpson_grid(g, 16))
    u = lambda x, y: np.sin(x) + y ** 3
    a, b = pg.scaled(e1), pg.scaled(e2)
    Ju = rescale_J(u, e1, e2)
    assert b.norm(Ju(b.x, b.y)) == pytest.approx(a.norm(u(a.x, a.y)), rel=1e-10)
    back = rescale_J(Ju, e2, e1)
    assert np.allclose(back(a.x, a.y), u(a.x, a.y), rtol=1e-12)
    assert rescale_J(u, e1, e1) is u


def test_single_constant_mode_lifts_to_constant_field(fork_grids):
    g, gg, pg = fork_grids
    noise = graph_cosine_noise(g, gg, [1.0])
    lifted = lift_noise(noise, pg)
    inc = lifted.increment(np.array([0.3]))
    assert np.allclose(inc, 0.3 / math.sqrt(gg.weight.sum()), rtol=1e-12)


def test_noise_modes_orthonormal_and_hs_norms(fork_grids):
    g, gg, pg = fork_grids
    lam = 2.0 ** -np.arange(1, 7)
    noise = graph_cosine_noise(g, gg, lam)
    F = noise.modes_on(gg)
    G = (F * gg.weight) @ F.T
    assert np.allclose(G, np.eye(lam.size), atol=1e-12)
    lifted = lift_noise(noise, pg)
    assert lifted.hs_norm() == pytest.approx(noise.hs_norm, rel=1e-8)
    assert noise.hs_norm == pytest.approx(np.sqrt(np.sum(lam ** 2)))


@settings(max_examples=30, deadline=None)
@given(arrays(float, (5, 4), elements=st.floats(-3, 3)))
def test_noise_wedge_is_bit_exact(fork_grids, db):
    g, gg, pg = fork_grids
    lifted = lift_noise(graph_cosine_noise(g, gg, 2.0 ** -np.arange(1, 5)), pg)
    assert np.array_equal(wedge(lifted.increment(db), pg), lifted.graph_increment(db))


def test_noise_rejects_bad_lambdas(fork_grids):
    g, gg, _ = fork_grids
    with pytest.raises(ValueError):
        graph_cosine_noise(g, gg, [0.1, 0.5])
    with pytest.raises(ValueError):
        graph_cosine_noise(g, gg, [10.0, 10.0], trace_bound=100.0)
