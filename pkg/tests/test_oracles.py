import math

import numpy as np
import pytest

from mecavoid.network import LinkModel
from mecavoid.oracles import (SUITES, check_closest_approach, check_cubic, check_fading, check_linear_reduction,
                              delivery_probability, grid_closest_approach, los_half_distance)


def test_grid_oracle_on_textbook_cases():
    # head-on from 100 m at 27.78 m/s closing speed
    t, d, amb = grid_closest_approach([[-100.0, 0.0]], [[27.78, 0.0]], span=10.0, step=1e-4)
    assert t[0] == pytest.approx(100 / 27.78, abs=1e-4) and d[0] < 1e-2 and not amb[0]
    # miss by 3 m laterally
    t, d, _ = grid_closest_approach([[-50.0, 3.0]], [[10.0, 0.0]], span=10.0, step=1e-4)
    assert t[0] == pytest.approx(5.0, abs=1e-4) and d[0] == pytest.approx(3.0, abs=1e-6)
    # accelerating from rest towards a point 8 m away: x(t) = -8 + t^2
    t, d, _ = grid_closest_approach([[-8.0, 0.0]], [[0.0, 0.0]], [[2.0, 0.0]], span=10.0, step=1e-4)
    assert t[0] == pytest.approx(math.sqrt(8.0), abs=1e-3)


def test_grid_oracle_finds_minimum_past_the_span():
    # slow closing: contact at t = 100 s, far beyond the default grid span
    t, d, _ = grid_closest_approach([[-100.0, 0.0]], [[1.0, 0.0]], [[1e-6, 0.0]])
    assert t[0] == pytest.approx(100.0, rel=1e-3)


def test_analytic_delivery_against_known_points():
    link = LinkModel()
    assert delivery_probability(link, 1.0, True) > 0.999
    assert delivery_probability(link, 5000.0, True) < 1e-3
    d50 = los_half_distance(link)
    assert delivery_probability(link, d50, True) == pytest.approx(0.5, abs=1e-6)


@pytest.mark.parametrize("check", [check_closest_approach, check_linear_reduction, check_cubic, check_fading])
def test_oracle_checks_pass(check):
    r = check()
    assert r.passed, r.line()


def test_examples_suite_passes():
    (r,) = SUITES["examples"]
    res = r()
    assert res.passed, res.line()


def test_suite_registry():
    assert set(SUITES) == {"closest", "cubic", "fading", "examples"}
    assert all(callable(f) for fns in SUITES.values() for f in fns)
    assert np.isfinite(los_half_distance(LinkModel()))
