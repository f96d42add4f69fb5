"""Eigenvalue error of the discrete generator on a single edge versus the exact Neumann spectrum.

The node-based stencil is second order, so the relative error of mode j behaves like
(j pi h / L)^2 / 12; this prints the observed errors and that prediction side by side.
"""
import math

import numpy as np

from channelgraph.geometry import rectangle
from channelgraph.graph_core import build_graph
from channelgraph.graph_operator import assemble_generator, eigen_decompose

LENGTH, MODES = 2.0, 5

if __name__ == "__main__":
    g = build_graph(rectangle(0, LENGTH, 0, 1))
    exact = -0.5 * (np.arange(1, MODES + 1) * math.pi / LENGTH) ** 2
    print(f"{'cells':>6} {'max rel err':>12} {'predicted':>12} {'order':>6}")
    prev = None
    for n in (50, 100, 200, 400, 800, 1600):
        mu = eigen_decompose(assemble_generator(g, n)).mu[1:MODES + 1]
        rel = float(np.max(np.abs(mu - exact) / np.abs(exact)))
        pred = (MODES * math.pi / n) ** 2 / 12
        order = "" if prev is None else f"{math.log2(prev / rel):6.2f}"
        print(f"{n:6d} {rel:12.3e} {pred:12.3e} {order:>6}")
        prev = rel
