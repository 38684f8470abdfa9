import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from mecavoid.messages import EntityKind
from mecavoid.mobility import (Entity, Ingress, MobilityParams, MotionSegment, Route, SpawnProcess,
                               Topology, Trajectory, World, counterfactual_contacts, overlap)

V, P = EntityKind.VEHICLE, EntityKind.PEDESTRIAN
PARAMS = MobilityParams()


def entity(eid, points, speed, spawn=0.0, kind=V, dims=(5.0, 1.8), segments=None):
    tr = Trajectory(Route(points, f"lane{eid}"), spawn, speed, segments)
    return Entity(eid, kind, f"in{eid}", tr, *dims)


def world_of(*ents, params=PARAMS):
    w = World(Topology({}, ()), params, max_segments=3)
    for e in ents:
        w.add(e)
    return w


def run_to(w, t_end):
    k = 0
    while (k + 1) * w.params.dt <= t_end + 1e-9:
        k += 1
        w.advance_to(k * w.params.dt)


# -- motion -------------------------------------------------------------------

def test_vehicle_advances():
    e = entity(1, [(0, 0), (600, 0)], 13.89, segments=[MotionSegment(0.0, 10.0, 13.89)])
    w = world_of(e)
    w.step(0.1)
    assert e.offset(w.time) == pytest.approx(11.389)
    assert w.positions_of(w.active_slots())[0] == pytest.approx([11.389, 0.0])


def test_stopped_entity_stays_put():
    e = entity(1, [(0, 0), (600, 0)], 13.89, segments=[MotionSegment(0.0, 10.0, 0.0, -4.5, 0.0)])
    w = world_of(e)
    w.step(0.1)
    assert e.offset(w.time) == pytest.approx(10.0)


def test_pedestrian_half_second():
    e = entity(1, [(0, 0), (100, 0)], 2.0, kind=P, dims=(0.5, 0.5))
    w = world_of(e, params=MobilityParams(dt=0.5))
    w.step(0.5)
    assert e.offset(w.time) == pytest.approx(1.0)


def test_vehicles_never_leave_their_lane():
    e = entity(1, [(0, -3), (600, -3)], 13.89)
    w = world_of(e)
    for _ in range(100):
        w.step(0.1)
        if len(w.active_slots()):
            assert w.positions_of(w.active_slots())[0][1] == pytest.approx(-3.0)


def test_brake_profile_is_exact():
    tr = Trajectory(Route([(0, 0), (600, 0)], "l"), 0.0, 13.89)
    tr.add_brake(2.0, 4.5)
    stop = 2.0 + 13.89 / 4.5
    assert tr.speed_at(stop + 1.0) == 0.0
    assert tr.s_at(stop + 5.0) == pytest.approx(13.89 * 2.0 + 13.89**2 / 9.0)
    ts = np.linspace(0, 10, 1001)
    assert np.allclose(tr.s_array(ts), [tr.s_at(t) for t in ts])


# -- spawning -----------------------------------------------------------------

def test_poisson_counts_over_seeds():
    counts = []
    gaps = []
    for seed in range(30):
        arr = SpawnProcess(Ingress("v", "l", 0.7), np.random.default_rng(seed)).arrivals(1000.0)
        counts.append(len(arr))
        gaps.extend(np.diff([0.0] + arr))
        assert abs(len(arr) - 700) <= 3 * math.sqrt(700)
    assert abs(np.mean(counts) - 700) <= 3 * math.sqrt(700 / 30)
    assert stats.kstest(gaps, "expon", args=(0, 1 / 0.7)).pvalue > 1e-3


def test_zero_rate_never_spawns():
    assert SpawnProcess(Ingress("v", "l", 0.0), np.random.default_rng(0)).arrivals(1000.0) == []


def test_spawns_reproducible():
    a = SpawnProcess(Ingress("v", "l", 0.7), np.random.default_rng(42)).arrivals(100.0)
    b = SpawnProcess(Ingress("v", "l", 0.7), np.random.default_rng(42)).arrivals(100.0)
    assert a == b


def test_topology_validation_and_round_trip():
    text = "[lanes]\nid,kind,x1,y1,x2,y2\na,vehicle,0,0,10,0\n[ingresses]\nlabel,lane_id,rate\nv,a,0.5\n"
    topo = Topology.parse(text)
    assert Topology.parse(topo.dumps()) == topo
    with pytest.raises(ValueError):
        Topology.parse(text.replace("v,a,0.5", "v,b,0.5"))
    with pytest.raises(ValueError):
        Topology.parse(text.replace("10,0", "0,0"))


# -- contacts -----------------------------------------------------------------

def test_disc_contact_examples():
    h = np.array([1.0, 0.0])
    assert overlap(np.zeros(2), h, 4.0, 1.8, np.array([3.9, 0.0]), h, 4.0, 1.8, "disc")
    assert not overlap(np.zeros(2), h, 4.0, 1.8, np.array([2.4, 0.0]), h, 0.6, 0.6, "disc")
    assert overlap(np.zeros(2), h, 4.0, 1.8, np.zeros(2), h, 0.6, 0.6, "disc")
    assert overlap(np.zeros(2), h, 5.0, 1.8, np.zeros(2), h, 0.5, 0.5, "box")


def corners(p, h, length, width):
    n = np.array([-h[1], h[0]])
    return np.array([p + sx * 0.5 * length * h + sy * 0.5 * width * n for sx in (-1, 1) for sy in (-1, 1)])


def boxes_overlap(pa, ha, la, wa, pb, hb, lb, wb):
    """Separating-axis test on explicit corners."""
    ca, cb = corners(pa, ha, la, wa), corners(pb, hb, lb, wb)
    for axis in (ha, np.array([-ha[1], ha[0]]), hb, np.array([-hb[1], hb[0]])):
        a, b = ca @ axis, cb @ axis
        if a.max() < b.min() or b.max() < a.min():
            return False
    return True


@settings(max_examples=300)
@given(st.floats(-8, 8), st.floats(-8, 8), st.floats(0, 2 * math.pi), st.floats(0, 2 * math.pi),
       st.floats(0.3, 6), st.floats(0.3, 3), st.floats(0.3, 6), st.floats(0.3, 3))
def test_box_overlap_matches_corner_projection(dx, dy, a1, a2, la, wa, lb, wb):
    ha, hb = np.array([math.cos(a1), math.sin(a1)]), np.array([math.cos(a2), math.sin(a2)])
    pa, pb = np.zeros(2), np.array([dx, dy])
    assert bool(overlap(pa, ha, la, wa, pb, hb, lb, wb, "box")) == boxes_overlap(pa, ha, la, wa, pb, hb, lb, wb)


def test_crossing_contact_time():
    # 5 m boxes crossing at the origin at 10 m/s: fronts touch the other's side at |x| = 3.4 m
    a = entity(1, [(-100, 0), (100, 0)], 10.0)
    b = entity(2, [(0, -100), (0, 100)], 10.0)
    w = world_of(a, b)
    run_to(w, 12.0)
    assert len(w.contacts) == 1
    assert w.contacts[0].time == pytest.approx((100 - 3.4) / 10.0, abs=1e-3)


def test_parallel_lanes_never_collide():
    a = entity(1, [(0, -3), (600, -3)], 13.89)
    b = entity(2, [(600, 3), (0, 3)], 13.89)
    w = world_of(a, b)
    run_to(w, 50.0)
    assert w.contacts == []
    assert counterfactual_contacts(w.history, PARAMS, 50.0) == []


def test_counterfactual_equals_actual_without_braking():
    a = entity(1, [(-100, 0), (100, 0)], 10.0)
    b = entity(2, [(0, -100), (0, 100)], 10.0, spawn=0.5)
    c = entity(3, [(200, 1), (-200, 1)], 13.89)
    w = World(Topology({}, ()), PARAMS, max_segments=3)
    ents = sorted([a, b, c], key=lambda e: e.spawn_time)
    k, nxt = 0, 0
    while k * 0.1 < 30.0:
        k += 1
        while nxt < len(ents) and ents[nxt].spawn_time <= k * 0.1:
            w.add(ents[nxt])
            nxt += 1
        w.advance_to(k * 0.1)
    cf = counterfactual_contacts(w.history, PARAMS, 30.0)
    assert [(c.pair, round(c.time, 9)) for c in cf] == [(c.pair, round(c.time, 9)) for c in w.contacts]
    assert cf


def test_head_on_braked_pair_is_counterfactual_only():
    a = entity(1, [(0, 0), (200, 0)], 10.0)
    b = entity(2, [(200, 0), (0, 0)], 10.0)
    w = world_of(a, b)
    run_to(w, 8.7)
    for e in (a, b):
        w.apply_brake(e, 8.7, 5.0)
    run_to(w, 30.0)
    pa, _ = a.trajectory.positions(np.array([12.0]))
    pb, _ = b.trajectory.positions(np.array([12.0]))
    assert np.hypot(*(pa[0] - pb[0])) == pytest.approx(6.0)
    assert w.contacts == []
    assert [c.pair for c in counterfactual_contacts(w.history, PARAMS, 30.0)] == [(1, 2)]
