"""Outcome classification, safety margins, BSM load and report writers."""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np

from mecavoid.messages import EntityKind, pair_key
from mecavoid.mobility import Trajectory, pair_first_contact
from mecavoid.reaction import ReactionProfile, schedule_for


class Outcome(str, enum.Enum):
    AVOIDED_ON_TIME = "AvoidedOnTime"
    DETECTED_TOO_LATE = "DetectedTooLate"
    UNDETECTED = "Undetected"
    FALSE_POSITIVE = "FalsePositive"
    TRUE_NEGATIVE = "TrueNegative"


GROUND_TRUTH_OUTCOMES = (Outcome.AVOIDED_ON_TIME, Outcome.DETECTED_TOO_LATE, Outcome.UNDETECTED)


class TraceError(RuntimeError):
    pass


def pair_class(kind_a: EntityKind, kind_b: EntityKind) -> str:
    n_ped = (kind_a == EntityKind.PEDESTRIAN) + (kind_b == EntityKind.PEDESTRIAN)
    return ("vehicle-vehicle", "vehicle-pedestrian", "pedestrian-pedestrian")[n_ped]


@dataclass
class PairRecord:
    a: int
    b: int
    kind_a: EntityKind
    kind_b: EntityKind
    ground_truth_collision: bool
    alerted: bool
    first_alert_delivery: float | None
    actual_contact: float | None
    ground_truth_contact: float | None
    outcome: Outcome
    safety_margin: float | None = None

    @property
    def pair(self) -> tuple[int, int]:
        return (self.a, self.b)

    @property
    def kinds(self) -> str:
        return pair_class(self.kind_a, self.kind_b)


def response_episode(entity, key):
    """First braking episode of ``entity`` triggered by an alert about ``key``."""
    for ep in entity.episodes:
        if ep.cause == key:
            return ep
    return None


def _end(entity, traj, horizon):
    if traj is entity.trajectory and entity.exit_time is not None:
        return min(entity.exit_time, horizon)
    return min(traj.exit_time(), horizon)


def ablated_contact(ea, eb, key, horizon, dt, model):
    """Contact time of the pair when each party ignores the alerts about this pair."""
    epa, epb = response_episode(ea, key), response_episode(eb, key)
    ta = ea.trajectory.ablated(epa.brake_start) if epa else ea.trajectory
    tb = eb.trajectory.ablated(epb.brake_start) if epb else eb.trajectory
    lo = max(ea.spawn_time, eb.spawn_time)
    hi = min(_end(ea, ta, horizon), _end(eb, tb, horizon))
    return pair_first_contact(ea, eb, lo, hi, dt, model, ta, tb)


def safety_margin(ea, eb, key, first_alert: float, horizon: float) -> float:
    """Centre distance once both parties have come to rest after the alert.

    The rest time is the later stop of each party's braking episode answering
    this pair (or, failing that, the episode it was in when the alert came or
    started right after).  A party that never stops is tracked until the
    stopped one resumes or either leaves, and the minimum distance is taken.
    """
    stops, resumes = [], []
    moving = False
    for e in (ea, eb):
        ep = response_episode(e, key)
        if ep is None:
            later = [x for x in e.episodes if x.resumed_at is None or x.resumed_at >= first_alert]
            ep = later[0] if later else None
        if ep is None:
            moving = True
            continue
        stops.append(ep.stop_time)
        if ep.resumed_at is not None:
            resumes.append(ep.resumed_at)
    t_rest = max(stops) if stops else first_alert
    t_rest = min(t_rest, horizon)
    t_end = min([horizon, _end(ea, ea.trajectory, horizon), _end(eb, eb.trajectory, horizon)]
                + [r for r in resumes if r >= t_rest])
    if not moving or t_end <= t_rest:
        times = np.array([t_rest])
    else:
        times = np.linspace(t_rest, t_end, max(2, int((t_end - t_rest) / 0.01) + 1))
    pa, _ = ea.trajectory.positions(times)
    pb, _ = eb.trajectory.positions(times)
    return float(np.min(np.hypot(pa[:, 0] - pb[:, 0], pa[:, 1] - pb[:, 1])))


@dataclass
class PairReplay:
    """A pair re-run with each party braking on its first alert about the pair."""

    contact: float | None
    trajectories: tuple
    schedules: tuple


def braked_copy(entity, sched) -> Trajectory:
    tr = entity.trajectory
    out = Trajectory(tr.route, tr.spawn_time, tr.max_speed, tr.segments)
    if sched is not None and sched.brake_start < out.exit_time():
        out.add_brake(sched.brake_start, sched.decel)
    return out


def replay_pair(ea, eb, key, first_to: dict, profile: ReactionProfile, horizon: float,
                dt: float, model: str, unbraked_contact: float | None = None) -> PairReplay:
    """Contact of a pair when both parties answer this pair's alerts and nothing else.

    ``first_to`` maps ``(pair_key, recipient_id)`` to the first delivery time.
    When the pair's unbraked first contact is known, the search skips the
    ticks before both it and the first brake, where nothing can differ.
    """
    trajs, scheds = [], []
    for e in (ea, eb):
        t_del = first_to.get((key, e.id))
        sched = None
        if t_del is not None:
            start = t_del + profile.delay(e.kind)
            sched = schedule_for(e.kind, e.trajectory.speed_at(start), t_del, profile, cause=key)
            if sched.initial_speed <= 0 or sched.brake_start >= e.trajectory.exit_time():
                sched = None
        scheds.append(sched)
        trajs.append(braked_copy(e, sched))
    lo = max(ea.spawn_time, eb.spawn_time)
    if unbraked_contact is not None:
        t0 = min([unbraked_contact] + [s.brake_start for s in scheds if s is not None])
        lo = max(lo, math.floor(t0 / dt + 1e-9) * dt)
    hi = min(min(t.exit_time(), horizon) for t in trajs)
    if all(s is not None for s in scheds):
        # both at rest from here on, so the pair's state no longer changes
        hi = min(hi, max(s.stop_time for s in scheds))
    contact = pair_first_contact(ea, eb, lo, hi, dt, model, trajs[0], trajs[1])
    return PairReplay(contact, tuple(trajs), tuple(scheds))


def replay_margin(replay: PairReplay, first_alert: float, horizon: float) -> float:
    """Centre distance once the braking parties of a replayed pair have stopped.

    A party that never brakes is followed until it leaves (or the horizon)
    and the closest approach over that stretch is reported.
    """
    stops = [s.stop_time for s in replay.schedules if s is not None]
    t_rest = min(max(stops) if stops else first_alert, horizon)
    ta, tb = replay.trajectories
    t_end = min(horizon, ta.exit_time(), tb.exit_time())
    if all(s is not None for s in replay.schedules) or t_end <= t_rest:
        times = np.array([min(t_rest, max(t_end, 0.0))])
    else:
        times = np.linspace(t_rest, t_end, max(2, int((t_end - t_rest) / 0.01) + 1))
    pa, _ = ta.positions(times)
    pb, _ = tb.positions(times)
    return float(np.min(np.hypot(pa[:, 0] - pb[:, 0], pa[:, 1] - pb[:, 1])))


def classify(entities: dict, contacts, deliveries, horizon: float, dt: float, model: str,
             ground_truth: str = "pairwise", global_contacts=None, scope: str = "pair",
             profile: ReactionProfile | None = None) -> list[PairRecord]:
    """One record per pair that was alerted or collided in either world.

    ``deliveries`` holds ``(time, recipient, pair_key)`` for alerts that
    reached a live party.

    With ``scope="pair"`` the world ran unbraked, so its contacts are the
    ground truth, and every alerted colliding pair is replayed on its own
    with both parties braking (``profile``) to decide whether the alert was
    in time.  With ``scope="live"`` braking happened in the world; then
    ``ground_truth="pairwise"`` compares against a reference where only the
    braking answering this pair is removed, and ``"global"`` against the
    fully unbraked replay in ``global_contacts``.
    """
    if scope not in ("pair", "live"):
        raise ValueError(f"scope must be pair or live, got {scope!r}")
    actual = {}
    for c in contacts:
        actual.setdefault(c.pair, c.time)
    first = {}
    first_to = {}
    for t, who, key in deliveries:
        if key not in first or t < first[key]:
            first[key] = t
        if (key, who) not in first_to or t < first_to[key, who]:
            first_to[key, who] = t
    if scope == "pair":
        return _classify_replayed(entities, actual, first, first_to, horizon, dt, model,
                                  profile or ReactionProfile())
    if ground_truth == "global":
        if global_contacts is None:
            raise TraceError("global ground truth needs the counterfactual contact list")
        gt_global = {}
        for c in global_contacts:
            gt_global.setdefault(c.pair, c.time)
        keys = set(first) | set(actual) | set(gt_global)
    else:
        keys = set(first) | set(actual)
    records = []
    for key in sorted(keys):
        a, b = key
        if a not in entities or b not in entities:
            raise TraceError(f"pair {key} refers to an entity without a trajectory")
        ea, eb = entities[a], entities[b]
        if ground_truth == "global":
            gt_t = gt_global.get(key)
        elif response_episode(ea, key) is None and response_episode(eb, key) is None:
            gt_t = actual.get(key)
        else:
            gt_t = ablated_contact(ea, eb, key, horizon, dt, model)
        fd = first.get(key)
        gt = gt_t is not None
        act = actual.get(key)
        if gt:
            counted = fd is not None and fd < gt_t
            if counted:
                outcome = Outcome.DETECTED_TOO_LATE if act is not None else Outcome.AVOIDED_ON_TIME
            else:
                outcome = Outcome.UNDETECTED
        else:
            counted = fd is not None
            outcome = Outcome.FALSE_POSITIVE if counted else Outcome.TRUE_NEGATIVE
        rec = PairRecord(a, b, ea.kind, eb.kind, gt, counted, fd, act, gt_t, outcome)
        if outcome == Outcome.AVOIDED_ON_TIME:
            rec.safety_margin = safety_margin(ea, eb, key, fd, horizon)
        records.append(rec)
    return records


def _classify_replayed(entities, actual, first, first_to, horizon, dt, model, profile):
    records = []
    for key in sorted(set(first) | set(actual)):
        a, b = key
        if a not in entities or b not in entities:
            raise TraceError(f"pair {key} refers to an entity without a trajectory")
        ea, eb = entities[a], entities[b]
        gt_t = actual.get(key)
        fd = first.get(key)
        margin = None
        act = None
        if gt_t is None:
            outcome = Outcome.FALSE_POSITIVE if fd is not None else Outcome.TRUE_NEGATIVE
            counted = fd is not None
        elif fd is None or fd >= gt_t:
            outcome, counted, act = Outcome.UNDETECTED, False, gt_t
        else:
            counted = True
            rp = replay_pair(ea, eb, key, first_to, profile, horizon, dt, model, unbraked_contact=gt_t)
            act = rp.contact
            if act is None:
                outcome = Outcome.AVOIDED_ON_TIME
                margin = replay_margin(rp, fd, horizon)
            else:
                outcome = Outcome.DETECTED_TOO_LATE
        records.append(PairRecord(a, b, ea.kind, eb.kind, gt_t is not None, counted, fd, act, gt_t,
                                  outcome, margin))
    return records


def traffic_load(times, window: float, t_end: float, step: float = 1.0, weights=None):
    """Message rate over a sliding window, sampled every ``step`` up to ``t_end``.

    Returns ``(sample_times, msgs_per_s)``; a sample at ``t`` counts messages
    in ``(t - window, t]``.
    """
    if window <= 0:
        raise ValueError("window must be positive")
    n = int(math.floor(t_end / step + 1e-9))
    ts = np.arange(1, n + 1) * step
    times = np.asarray(times, dtype=float)
    w = np.ones_like(times) if weights is None else np.asarray(weights, dtype=float)
    order = np.argsort(times, kind="stable")
    times, w = times[order], w[order]
    cum = np.concatenate([[0.0], np.cumsum(w)])
    hi = np.searchsorted(times, ts + 1e-9, side="right")
    lo = np.searchsorted(times, ts - window + 1e-9, side="right")
    return ts, (cum[hi] - cum[lo]) / window


def steady_mean(ts, values, warmup: float) -> float | None:
    ts = np.asarray(ts)
    values = np.asarray(values)
    sel = ts >= warmup
    if not sel.any():
        return None
    return float(values[sel].mean())


def _rate(num, den):
    return None if den == 0 else num / den


@dataclass
class RunReport:
    seed: int
    duration_s: float
    config: dict
    records: list = field(default_factory=list)
    bsm_total: int = 0
    load_times: list = field(default_factory=list)
    load_series: list = field(default_factory=list)
    load_steady: float | None = None
    vehicle_population: float | None = None
    pedestrian_population: float | None = None
    entities_spawned: dict = field(default_factory=dict)
    actual_contacts: int = 0
    alerts_issued: int = 0
    alert_deliveries: int = 0

    def counts(self, kinds: str | None = None) -> dict:
        out = {o.value: 0 for o in Outcome if o != Outcome.TRUE_NEGATIVE}
        for r in self.records:
            if kinds is not None and r.kinds != kinds:
                continue
            if r.outcome != Outcome.TRUE_NEGATIVE:
                out[r.outcome.value] += 1
        return out

    def summary(self, kinds: str | None = None) -> dict:
        c = self.counts(kinds)
        gt = sum(c[o.value] for o in GROUND_TRUTH_OUTCOMES)
        detected = c[Outcome.AVOIDED_ON_TIME.value] + c[Outcome.DETECTED_TOO_LATE.value]
        alerted = detected + c[Outcome.FALSE_POSITIVE.value]
        return {
            "counts": c,
            "ground_truth_collisions": gt,
            "detection_rate": _rate(detected, gt),
            "undetected_fraction": _rate(c[Outcome.UNDETECTED.value], gt),
            "fp_count": c[Outcome.FALSE_POSITIVE.value],
            "fn_count": c[Outcome.UNDETECTED.value],
            "alerted_pairs": alerted,
            "fp_share": _rate(c[Outcome.FALSE_POSITIVE.value], alerted),
        }

    def margins(self, kinds: str | None = None) -> list[float]:
        return [r.safety_margin for r in self.records
                if r.outcome == Outcome.AVOIDED_ON_TIME and (kinds is None or r.kinds == kinds)]

    def to_dict(self) -> dict:
        overall = self.summary()
        return {
            "seed": self.seed,
            "duration_s": self.duration_s,
            "config": self.config,
            **overall,
            "by_pair_kind": {k: self.summary(k) for k in ("vehicle-vehicle", "vehicle-pedestrian")},
            "safety_margins": {k: [round(m, 6) for m in self.margins(k)]
                               for k in ("vehicle-vehicle", "vehicle-pedestrian")},
            "bsm_total": self.bsm_total,
            "bsm_load": {
                "steady_state_msgs_per_s": self.load_steady,
                "t": self.load_times,
                "msgs_per_s": [round(v, 6) for v in self.load_series],
            },
            "population": {"vehicles_mean": self.vehicle_population,
                           "pedestrians_mean": self.pedestrian_population,
                           "spawned": self.entities_spawned},
            "actual_contacts": self.actual_contacts,
            "alerts_issued": self.alerts_issued,
            "alert_deliveries": self.alert_deliveries,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


COLLISIONS_HEADER = ["pair_a", "pair_b", "kinds", "outcome", "margin_m", "contact_t", "first_alert_t"]


def _opt(v):
    return "" if v is None else f"{v:.6f}"


def write_collisions_csv(records, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(COLLISIONS_HEADER)
    for r in records:
        if r.outcome == Outcome.TRUE_NEGATIVE:
            continue
        contact = r.actual_contact if r.actual_contact is not None else r.ground_truth_contact
        w.writerow([r.a, r.b, r.kinds, r.outcome.value, _opt(r.safety_margin), _opt(contact),
                    _opt(r.first_alert_delivery)])


def write_load_csv(ts, values, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["t", "msgs_per_s"])
    for t, v in zip(ts, values):
        w.writerow([f"{t:.3f}", f"{v:.6f}"])


__all__ = ["Outcome", "PairRecord", "RunReport", "classify", "safety_margin", "traffic_load",
           "steady_mean", "pair_key", "write_collisions_csv", "write_load_csv", "TraceError"]
