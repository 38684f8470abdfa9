import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mecavoid.kinematics import closest_approach_linear, relative_motion
from mecavoid.messages import (Bsm, EntityKind, MalformedBsm, NeighborTable, read_bsm_csv,
                               write_bsm_csv)

V = EntityKind.VEHICLE


def bsm(sender, t=0.0, x=0.0, y=0.0, speed=0.0, heading=0.0, kind=V):
    return Bsm(t, sender, kind, x, y, speed, heading)


def test_upsert_insert_stale_and_independent():
    tab = NeighborTable()
    assert tab.upsert(bsm(1, t=1.0), 1.0)
    assert len(tab) == 1
    tab = NeighborTable()
    tab.upsert(bsm(1, t=2.0, x=5.0), 2.0)
    assert not tab.upsert(bsm(1, t=1.5, x=9.0), 2.1)
    assert tab.get(1)[0].x == 5.0
    tab.upsert(bsm(2, t=2.0), 2.0)
    assert len(tab) == 2


def test_prune_boundary_inclusive():
    tab = NeighborTable()
    tab.upsert(bsm(1, t=10.0), 10.0)
    assert tab.prune(10.8, 0.8) == 0 and len(tab) == 1
    assert tab.prune(10.9, 0.8) == 1 and len(tab) == 0
    assert NeighborTable().prune(5.0, 0.8) == 0


def test_candidates_examples():
    tagged = bsm(1, speed=13.89)
    tab = NeighborTable()
    tab.upsert(bsm(2, x=500.0), 0.0)
    assert tab.candidates(tagged, 10.0, 27.78) == []
    # directly behind and receding
    tab = NeighborTable()
    tab.upsert(bsm(3, x=-100.0, speed=5.0, heading=math.pi), 0.0)
    assert tab.candidates(tagged, 10.0, 27.78) == []
    # head-on, 50 m away
    tab = NeighborTable()
    tab.upsert(bsm(4, x=50.0, speed=13.89, heading=math.pi), 0.0)
    assert [b.sender_id for b in tab.candidates(tagged, 10.0, 27.78)] == [4]


def test_malformed_bsm_rejected():
    with pytest.raises(MalformedBsm):
        bsm(1, speed=-1.0).validate()
    with pytest.raises(MalformedBsm):
        bsm(1, heading=7.0).validate()
    with pytest.raises(MalformedBsm):
        Bsm(math.nan, 1, V, 0, 0, 0, 0).validate()


def test_csv_round_trip():
    items = [Bsm(0.1, 3, V, 1.5, -2.25, 13.89, 1.0, 0.1, -0.2, 5.0, 1.8),
             Bsm(0.2, 4, EntityKind.PEDESTRIAN, 0.0, 9.5, 2.0, 3.0, 0.0, 0.0, 0.5, 0.5)]
    buf = io.StringIO()
    write_bsm_csv(items, buf)
    assert buf.getvalue().splitlines()[0] == "generated_at,sender_id,kind,x,y,speed,heading,ax,ay,length,width"
    assert read_bsm_csv(buf.getvalue()) == items


@given(st.lists(st.tuples(st.integers(0, 9), st.floats(0, 50)), max_size=60))
def test_table_one_record_per_sender_and_prune_age(events):
    tab = NeighborTable(capacity=2)
    seen = set()
    latest = {}
    for sender, t in events:
        tab.upsert(bsm(sender, t=t), t)
        seen.add(sender)
        latest[sender] = max(latest.get(sender, -1.0), t)
    assert len(tab) <= len(seen)
    for sender, t in latest.items():
        assert tab.get(sender)[0].generated_at == t
    tab.prune(40.0, 0.8)
    for b, _ in tab.records():
        assert 40.0 - b.generated_at <= 0.8


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_prefilter_never_drops_a_detection(seed):
    # 400 random pairs per example; 25 examples cover 10,000 pairs
    rng = np.random.default_rng(seed)
    horizon, s2c, vmax = 10.0, 5.0, 13.89
    for _ in range(400):
        sp = rng.uniform(0, vmax, 2)
        hd = rng.uniform(0, 2 * math.pi, 2)
        xy = rng.uniform(-200, 200, (2, 2))
        tagged = bsm(1, x=xy[0, 0], y=xy[0, 1], speed=sp[0], heading=hd[0])
        other = bsm(2, x=xy[1, 0], y=xy[1, 1], speed=sp[1], heading=hd[1])
        tab = NeighborTable()
        tab.upsert(other, 0.0)
        kept = tab.candidates(tagged, horizon, 2 * vmax, allowance=s2c)
        ca = closest_approach_linear(relative_motion(tagged.state(), other.state()))
        if 0 <= ca.t_star <= horizon and ca.d_star <= s2c:
            assert kept, (tagged, other, ca)
