import math

import numpy as np
import pytest

from channelgraph.experiments import bin_areas, ladder_decreasing, limit_value, parse_observable
from channelgraph.geometry import fork, rectangle, sine_strip


def test_bin_areas():
    A = bin_areas(rectangle(), np.linspace(0, 1, 5), np.linspace(0, 1, 5))
    assert np.allclose(A, 1 / 16, rtol=1e-12)
    sc = sine_strip()
    x0, x1, y0, y1 = sc.bounding_box
    A = bin_areas(sc, np.linspace(x0, x1, 7), np.linspace(y0, y1, 7))
    assert A.sum() == pytest.approx(4 * math.pi, rel=1e-10)
    A = bin_areas(fork(), np.array([1.0, 2.0]), np.array([0.4, 0.6]))
    assert A[0, 0] == pytest.approx(0.0, abs=1e-14)


def test_ladder_decreasing():
    assert ladder_decreasing([3.0, 2.0, 1.0], [0.1, 0.1, 0.1])
    assert ladder_decreasing([1.0, 1.2, 0.5], [0.1, 0.1, 0.1])
    assert not ladder_decreasing([1.0, 2.0], [0.1, 0.1])


def test_limit_value_constant_and_long_time():
    phi = parse_observable("2 + 0*x")
    assert limit_value(sine_strip(), phi, (1.0, 1.0), 0.3, 64) == pytest.approx(2.0, rel=1e-12)
    # long times relax to the nu-average of the cross-section mean: E x = pi - 1/2
    v = limit_value(sine_strip(), parse_observable("x"), (1.0, 1.0), 200.0, 200)
    assert v == pytest.approx(math.pi - 0.5, abs=1e-3)
