import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mecavoid.messages import EntityKind
from mecavoid.metrics import (GROUND_TRUTH_OUTCOMES, Outcome, RunReport, TraceError, classify, steady_mean,
                              traffic_load, write_collisions_csv)
from mecavoid.mobility import Entity, MobilityParams, Route, Topology, Trajectory, World
from mecavoid.reaction import ReactionProfile

V, P = EntityKind.VEHICLE, EntityKind.PEDESTRIAN
# no reaction delay and 5 m/s^2 so a 10 m/s vehicle stops in exactly 10 m
INSTANT = ReactionProfile(processing_delay=0.0, human_reaction=0.0, pedestrian_reaction=0.0, decel=5.0)
HORIZON = 30.0


def entity(eid, points, speed, kind=V, dims=(5.0, 1.8)):
    return Entity(eid, kind, f"in{eid}", Trajectory(Route(points, f"l{eid}"), 0.0, speed), *dims)


def unbraked(*ents):
    w = World(Topology({}, ()), MobilityParams(), max_segments=3)
    for e in ents:
        w.add(e)
    k = 0
    while (k + 1) * 0.1 <= HORIZON + 1e-9:
        k += 1
        w.advance_to(k * 0.1)
    return {e.id: e for e in ents}, w.contacts


def head_on():
    # closing at 20 m/s from 200 m, unbraked boxes touch at t = 9.75
    return unbraked(entity(1, [(0, 0), (300, 0)], 10.0), entity(2, [(200, 0), (-100, 0)], 10.0))


def judge(ents, contacts, deliveries):
    return classify(ents, contacts, deliveries, HORIZON, 0.1, "box", profile=INSTANT)


def both(t, key=(1, 2)):
    return [(t, key[0], key), (t, key[1], key)]


def test_head_on_contact_time():
    _, contacts = head_on()
    assert [c.pair for c in contacts] == [(1, 2)]
    assert contacts[0].time == pytest.approx(9.8, abs=0.051)


def test_early_alert_avoided_with_margin():
    ents, contacts = head_on()
    # each stops 10 m after 8.64 s of travel: 200 - 2 * 96.4 = 7.2 m apart
    (rec,) = judge(ents, contacts, both(8.64))
    assert rec.outcome == Outcome.AVOIDED_ON_TIME
    assert rec.safety_margin == pytest.approx(7.2)
    assert rec.actual_contact is None and rec.ground_truth_contact is not None


def test_late_alert_detected_too_late():
    ents, contacts = head_on()
    (rec,) = judge(ents, contacts, both(9.5))
    assert rec.outcome == Outcome.DETECTED_TOO_LATE
    assert rec.actual_contact is not None


def test_missing_or_post_contact_alert_is_undetected():
    ents, contacts = head_on()
    assert judge(ents, contacts, [])[0].outcome == Outcome.UNDETECTED
    assert judge(ents, contacts, both(12.0))[0].outcome == Outcome.UNDETECTED


def test_single_recipient_counts():
    ents, contacts = head_on()
    (rec,) = judge(ents, contacts, [(5.0, 1, (1, 2))])
    assert rec.alerted and rec.outcome in (Outcome.AVOIDED_ON_TIME, Outcome.DETECTED_TOO_LATE)


def test_alert_on_safe_pair_is_false_positive():
    ents, contacts = unbraked(entity(1, [(0, -3), (300, -3)], 10.0), entity(2, [(300, 3), (0, 3)], 10.0))
    assert contacts == []
    (rec,) = judge(ents, contacts, both(2.0))
    assert rec.outcome == Outcome.FALSE_POSITIVE and not rec.ground_truth_collision


def test_vehicle_pedestrian_margin():
    # vehicle stops at x = 94, a 0.5 m/s pedestrian stops on the lane axis at x = 100
    veh = entity(1, [(-16, 0), (300, 0)], 10.0)
    ped = entity(2, [(100, -5.0625), (100, 30)], 0.5, kind=P, dims=(0.5, 0.5))
    ents, contacts = unbraked(veh, ped)
    assert [c.pair for c in contacts] == [(1, 2)]
    (rec,) = judge(ents, contacts, both(10.0))
    assert rec.outcome == Outcome.AVOIDED_ON_TIME
    assert rec.kinds == "vehicle-pedestrian"
    assert rec.safety_margin == pytest.approx(6.0)


def test_trace_without_trajectory_is_an_error():
    ents, contacts = head_on()
    del ents[2]
    with pytest.raises(TraceError):
        judge(ents, contacts, [])


@settings(max_examples=40, deadline=None)
@given(st.one_of(st.none(), st.floats(0.0, 15.0)), st.one_of(st.none(), st.floats(0.0, 15.0)))
def test_partition_and_margin_floor(ta, tb):
    ents, contacts = head_on()
    deliveries = [(t, who, (1, 2)) for t, who in ((ta, 1), (tb, 2)) if t is not None]
    (rec,) = judge(ents, contacts, deliveries)
    assert rec.ground_truth_collision
    assert sum(rec.outcome == o for o in GROUND_TRUTH_OUTCOMES) == 1
    if rec.outcome == Outcome.AVOIDED_ON_TIME:
        # collinear boxes touch at a centre gap of one vehicle length
        assert rec.safety_margin > 5.0


def test_fixed_rate_load():
    rng = np.random.default_rng(0)
    phases = rng.uniform(0, 0.1, 60)
    times = (np.arange(0, 1000) * 0.1)[None, :] + phases[:, None]
    ts, rate = traffic_load(times.ravel(), 1.0, 100.0)
    assert steady_mean(ts, rate, 10.0) == pytest.approx(600.0)
    assert np.all(np.abs(rate[ts >= 2.0] - 600.0) <= 1e-9)


def test_empty_load_is_zero():
    ts, rate = traffic_load([], 1.0, 20.0)
    assert len(ts) == 20 and np.all(rate == 0.0)
    with pytest.raises(ValueError):
        traffic_load([], 0.0, 20.0)


def test_report_summary_and_csv():
    ents, contacts = head_on()
    records = judge(ents, contacts, both(8.64))
    safe_ents, _ = unbraked(entity(3, [(0, -3), (300, -3)], 10.0), entity(4, [(300, 3), (0, 3)], 10.0))
    records += judge(safe_ents, [], both(2.0, (3, 4)))
    rep = RunReport(seed=1, duration_s=HORIZON, config={}, records=records)
    s = rep.summary("vehicle-vehicle")
    assert s["detection_rate"] == 1.0 and s["fp_count"] == 1 and s["fp_share"] == 0.5
    assert rep.summary("vehicle-pedestrian")["detection_rate"] is None
    buf = io.StringIO()
    write_collisions_csv(records, buf)
    rows = buf.getvalue().splitlines()
    assert rows[0].startswith("pair_a,pair_b,kinds,outcome") and len(rows) == 3
