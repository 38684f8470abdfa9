import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mecavoid.beaconing import BeaconPolicy, emit_mask, heading_change, pedestrian_schedule, should_emit
from mecavoid.kinematics import Vec2

DYN = BeaconPolicy()


def state(x=0.0, speed=13.89, heading=0.0):
    return (Vec2(x, 0.0), speed, heading)


def test_dynamic_examples():
    assert not should_emit(DYN, state(10.0), state(0.0), 0.05)
    assert should_emit(DYN, state(0.0, 0.0), state(0.0, 0.0), 1.2)
    moved = 13.89 * 0.3
    assert moved == pytest.approx(4.167)
    assert should_emit(DYN, state(moved), state(0.0), 0.3)
    assert not should_emit(DYN, state(3.9), state(0.0), 0.3)


def test_dynamic_speed_and_heading_triggers():
    assert should_emit(DYN, state(0.0, 13.0), state(0.0, 13.6), 0.2)
    assert should_emit(DYN, state(0.0, heading=math.radians(5)), state(0.0), 0.2)
    assert not should_emit(DYN, state(0.0, heading=math.radians(3)), state(0.0), 0.2)


def test_pedestrian_schedule():
    ped = pedestrian_schedule()
    cur, last = state(0.0, 2.0), state(0.0, 2.0)
    assert not should_emit(ped, cur, last, 0.99)
    assert should_emit(ped, cur, last, 1.0)
    assert should_emit(ped, cur, last, 1.5)


def test_first_message_always_sent():
    assert should_emit(DYN, state(), None, 0.0)


def test_parse_and_validation():
    assert BeaconPolicy.parse("fixed10").rate_hz == 10.0
    assert BeaconPolicy.parse("fixed:5").rate_hz == 5.0
    assert BeaconPolicy.parse("dynamic").dynamic
    with pytest.raises(ValueError):
        BeaconPolicy.parse("sometimes")
    with pytest.raises(ValueError):
        BeaconPolicy(min_interval=2.0, max_interval=1.0)


def test_heading_change_wraps():
    assert heading_change(0.01, 2 * math.pi - 0.01) == pytest.approx(0.02)


def simulate(policy, speeds, headings, dt=0.1):
    """Tick-by-tick emissions of one entity with the given speed/heading per tick."""
    pos = Vec2(0.0, 0.0)
    last, last_t, sent = None, None, []
    for k, (v, h) in enumerate(zip(speeds, headings)):
        t = k * dt
        if k:
            pos = pos + Vec2(math.cos(h), math.sin(h)) * (v * dt)
        cur = (pos, v, h)
        if should_emit(policy, cur, last, 0.0 if last_t is None else t - last_t):
            sent.append(t)
            last, last_t = cur, t
    return sent


@given(st.lists(st.tuples(st.floats(0, 13.89), st.floats(0, 2 * math.pi - 1e-9)), min_size=200, max_size=300))
def test_rate_bounds(profile):
    speeds, headings = zip(*profile)
    sent = np.array(simulate(DYN, speeds, headings))
    gaps = np.diff(sent)
    assert np.all(gaps >= 0.1 - 1e-9) and np.all(gaps <= 1.0 + 1e-9)
    t_end = 0.1 * (len(profile) - 1)
    for w0 in np.arange(0.0, t_end - 10.0, 1.0):
        n = np.sum((sent >= w0) & (sent < w0 + 10.0))
        assert 10 <= n <= 100


@given(st.lists(st.floats(0, 13.89), min_size=50, max_size=200))
def test_dynamic_never_exceeds_fixed(speeds):
    headings = [0.0] * len(speeds)
    assert len(simulate(DYN, speeds, headings)) <= len(simulate(BeaconPolicy.fixed(10.0), speeds, headings))


def test_constant_velocity_is_periodic():
    sent = np.diff(simulate(DYN, [13.89] * 300, [0.0] * 300))
    # 4 m at 13.89 m/s is crossed on the 3rd tick
    assert np.allclose(sent, 0.3)


@given(st.integers(0, 2**32 - 1))
def test_emit_mask_matches_scalar(seed):
    rng = np.random.default_rng(seed)
    n = 50
    pos, pos0 = rng.uniform(-10, 10, (n, 2)), rng.uniform(-10, 10, (n, 2))
    sp, sp0 = rng.uniform(0, 14, n), rng.uniform(0, 14, n)
    hd, hd0 = rng.uniform(0, 2 * math.pi, n), rng.uniform(0, 2 * math.pi, n)
    el = rng.choice([0.05, 0.1, 0.3, 0.7, 1.0, 1.5], n)
    for policy in (DYN, BeaconPolicy.fixed(10.0), BeaconPolicy.fixed(1.0)):
        m = emit_mask(policy, el, pos, pos0, sp, sp0, hd, hd0)
        ref = [should_emit(policy, (Vec2(*pos[i]), sp[i], hd[i]), (Vec2(*pos0[i]), sp0[i], hd0[i]), el[i])
               for i in range(n)]
        assert list(m) == ref
