"""Deterministic discrete-event core tying mobility, beaconing, delivery and detection together."""

from __future__ import annotations

import heapq
import itertools
import json
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from mecavoid.beaconing import emit_mask
from mecavoid.config import ScenarioConfig
from mecavoid.detector import CollisionDetector, OnboardDetectors, evaluate_pairs
from mecavoid.messages import Bsm, EntityKind, pair_key
from mecavoid.metrics import RunReport, classify, steady_mean, traffic_load
from mecavoid.mobility import Entity, SpawnProcess, Topology, Trajectory, World, counterfactual_contacts
from mecavoid.network import buildings_array, load_buildings, los_mask
from mecavoid.reaction import on_alert

TWO_PI = 2.0 * math.pi

# equal-time ordering: messages land before the brakes they trigger, before spawns and ticks
DELIVERY, BRAKE, SPAWN, TICK, END = range(5)


class SimulationError(RuntimeError):
    pass


@dataclass(order=True)
class Event:
    time: float
    cls: int
    key: tuple
    seq: int
    kind: str = field(compare=False)
    data: object = field(compare=False, default=None)


class EventQueue:
    def __init__(self):
        self._heap: list[Event] = []
        self._seq = itertools.count()
        self.now = 0.0

    def push(self, time: float, cls: int, kind: str, data=None, key=()) -> Event:
        if time < self.now - 1e-12:
            raise SimulationError(f"event {kind} scheduled at {time} before clock {self.now}")
        ev = Event(time, cls, key, next(self._seq), kind, data)
        heapq.heappush(self._heap, ev)
        return ev

    def pop(self) -> Event:
        ev = heapq.heappop(self._heap)
        self.now = ev.time
        return ev

    def __len__(self) -> int:
        return len(self._heap)


class RngStreams:
    """Named generators derived from one master seed; names are hashed stably."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        g = self._streams.get(name)
        if g is None:
            g = np.random.default_rng(np.random.SeedSequence([self.seed, zlib.crc32(name.encode())]))
            self._streams[name] = g
        return g


def sweep_seed(master_seed: int, index: int) -> int:
    """Per-run seed of a sweep, derived from (master_seed, run_index)."""
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


@dataclass
class Trace:
    events: list = field(default_factory=list)
    positions: list = field(default_factory=list)
    alerts: list = field(default_factory=list)
    deliveries: list = field(default_factory=list)
    bsm_ticks: list = field(default_factory=list)
    bsm_counts: list = field(default_factory=list)
    population: list = field(default_factory=list)

    def event(self, _t, _name, **data):
        self.events.append({"t": round(_t, 9), "event": _name, **data})

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events)


class Simulation:
    def __init__(self, cfg: ScenarioConfig, seed: int | None = None, trace: bool = False):
        self.cfg = cfg.validate()
        self.seed = cfg.master_seed if seed is None else int(seed)
        m = cfg.mobility
        self.params = m.params()
        topo = Topology.load(cfg.topology_path())
        self.topology = topo.with_rates(m.vehicle_rate, m.pedestrian_rate)
        bp = cfg.buildings_path()
        self.boxes = buildings_array(load_buildings(bp) if bp else [])
        self.world = World(self.topology, self.params)
        self.detector = CollisionDetector(cfg.detector)
        self.onboard = OnboardDetectors(cfg.detector)
        self.reaction = cfg.reaction_profile()
        self.vehicle_policy = cfg.vehicle_policy()
        self.pedestrian_policy = cfg.pedestrian_policy()
        self.distributed = cfg.mode == "distributed"
        self.live_braking = cfg.reaction.scope == "live"
        self.streams = RngStreams(self.seed)
        self.fading = self.streams.get("fading")
        self.queue = EventQueue()
        self.trace = Trace()
        self.keep_trace = trace
        self.spawners = {}
        self.routes = {}
        self.backlog = {}
        self.retry_pending = {}
        for ing in self.topology.ingresses:
            self.spawners[ing.label] = SpawnProcess(ing, self.streams.get(f"spawn:{ing.label}"))
            self.routes[ing.label] = self.topology.route_options(ing)
            self.backlog[ing.label] = 0
            self.retry_pending[ing.label] = False
        self._ingress = {ing.label: ing for ing in self.topology.ingresses}
        self._next_id = 1
        self._grow_beacon(256)

    # -- per-slot beacon memory ------------------------------------------
    def _grow_beacon(self, cap: int) -> None:
        old = getattr(self, "_b_time", np.zeros(0))
        n = len(old)
        def g(name, shape=(), fill=0.0):
            arr = np.full((cap,) + shape, fill)
            if n:
                arr[:n] = getattr(self, name)
            setattr(self, name, arr)
        g("_b_time", (), -math.inf)
        g("_b_pos", (2,))
        g("_b_speed")
        g("_b_head")

    # -- main loop --------------------------------------------------------
    def run(self) -> tuple[Trace, RunReport]:
        dur = self.cfg.duration_s
        dt = self.params.dt
        if dur > 0:
            for label in sorted(self.spawners):
                t = self.spawners[label].next_arrival(0.0)
                if t <= dur:
                    self.queue.push(t, SPAWN, "arrival", label, key=(label,))
            if dt <= dur + 1e-9:
                self.queue.push(dt, TICK, "tick", 1)
        self.queue.push(dur, END, "end")
        handlers = {"arrival": self._on_arrival, "retry": self._on_retry, "tick": self._on_tick,
                    "bsm_batch": self._on_bsm_batch, "alert": self._on_alert_delivery,
                    "brake": self._on_brake}
        while self.queue:
            ev = self.queue.pop()
            if ev.kind == "end":
                break
            try:
                handlers[ev.kind](ev)
            except SimulationError:
                raise
            except Exception as exc:  # surface the event that broke an invariant
                raise SimulationError(f"while handling {ev.kind} at t={ev.time}: {exc}") from exc
        self._run_tail()
        return self.trace, self._report()

    def _run_tail(self) -> None:
        """Keep moving (no spawns, no messages) for one prediction horizon past the end,
        so pairs alerted near the end can still meet their ground-truth contact."""
        dt = self.params.dt
        self.tail_end = self.cfg.duration_s + self.cfg.detector.horizon
        k = int(math.floor(self.world.time / dt + 1e-9)) + 1
        while k * dt <= self.tail_end + 1e-9:
            self.world.advance_to(k * dt)
            k += 1

    # -- spawning ---------------------------------------------------------
    def _on_arrival(self, ev: Event) -> None:
        label = ev.data
        self.backlog[label] += 1
        nxt = self.spawners[label].next_arrival(ev.time)
        if nxt <= self.cfg.duration_s:
            self.queue.push(nxt, SPAWN, "arrival", label, key=(label,))
        self._try_spawn(label, ev.time)

    def _on_retry(self, ev: Event) -> None:
        self.retry_pending[ev.data] = False
        self._try_spawn(ev.data, ev.time)

    def _try_spawn(self, label: str, t: float) -> None:
        if self.backlog[label] == 0:
            return
        ing = self._ingress[label]
        kind = self.topology.kind_of(ing)
        wait = self.world.spawn_blocked_until(ing.lane_id, kind, t)
        if wait is None:
            self._spawn(label, kind, t)
            self.backlog[label] -= 1
            if self.backlog[label] > 0:
                wait = t + self.params.min_headway
        if wait is not None and not self.retry_pending[label] and wait <= self.cfg.duration_s:
            self.retry_pending[label] = True
            self.queue.push(wait, SPAWN, "retry", label, key=(label,))

    def _spawn(self, label: str, kind: EntityKind, t: float) -> Entity:
        draw = self.streams.get(f"penetration:{label}").random()
        equipped = bool(draw < self.cfg.penetration)
        if self.distributed and kind == EntityKind.PEDESTRIAN and not self.cfg.network.pedestrian_v2v:
            equipped = False
        options = self.routes[label]
        pick = 0
        if kind == EntityKind.PEDESTRIAN:
            pick = int(self.streams.get(f"routing:{label}").integers(len(options)))
        length, width = self.params.dims(kind)
        traj = Trajectory(options[pick], t, self.params.speed(kind))
        e = Entity(self._next_id, kind, label, traj, length, width, equipped)
        self._next_id += 1
        self.world.add(e)
        if e.slot >= len(self._b_time):
            self._grow_beacon(2 * len(self._b_time))
        self._b_time[e.slot] = -math.inf
        self.onboard.reset_slot(e.slot, e.id, int(kind))
        if self.keep_trace:
            self.trace.event(t, "spawn", id=e.id, kind=kind.label, ingress=label, equipped=equipped)
        return e

    # -- tick: motion, contacts, resumes, beacons -------------------------
    def _on_tick(self, ev: Event) -> None:
        k = ev.data
        t = ev.time
        world = self.world
        for c in world.advance_to(t):
            if self.keep_trace:
                self.trace.event(c.time, "contact", pair=list(c.pair), x=c.x, y=c.y)
        if self.live_braking:
            self._resume_checks(t)
        self._beacons(t)
        slots = world.active_slots()
        kinds = world.kinds(slots)
        n_ped = int((kinds == int(EntityKind.PEDESTRIAN)).sum())
        self.trace.population.append((t, len(slots) - n_ped, n_ped))
        if self.keep_trace:
            pos = world.positions_of(slots)
            for s, (x, y) in zip(slots, pos):
                e = world.entity_at(s)
                self.trace.positions.append((t, e.id, e.kind.label, x, y, world._v[s]))
        nxt = (k + 1) * self.params.dt
        if nxt <= self.cfg.duration_s + 1e-9:
            self.queue.push(nxt, TICK, "tick", k + 1)

    def _resume_checks(self, t: float) -> None:
        world = self.world
        waiting = [e for e in world.entities.values()
                   if e.braking is not None and e.braking.brake_start <= t
                   and t >= e.braking.stop_time + self.params.resume_delay - 1e-9]
        if not waiting:
            return
        cfg = self.cfg.detector
        for e in sorted(waiting, key=lambda x: x.id):
            slots = world.active_slots()
            slots = slots[slots != e.slot]
            clear = True
            if len(slots):
                pos, vel, acc, _ = world.state_arrays(slots)
                me = np.array([e.slot])
                mpos = world.positions_of(me)
                mvel = world._head[me] * e.max_speed
                n = len(slots)
                _, _, hit = evaluate_pairs(cfg, np.repeat(mpos, n, 0), np.repeat(mvel, n, 0),
                                           np.zeros((n, 2)), np.full(n, int(e.kind), np.int8),
                                           pos, vel, acc, world.kinds(slots))
                clear = not hit.any()
            waited = t - e.braking.stop_time
            if clear or waited >= self.params.max_wait:
                world.resume(e, t)
                e.braking.resumed_at = t
                e.braking = None
                if self.keep_trace:
                    self.trace.event(t, "resume", id=e.id, forced=not clear)

    def _beacons(self, t: float) -> None:
        world = self.world
        slots = world.active_slots()
        if len(slots) == 0:
            self.trace.bsm_ticks.append(t)
            self.trace.bsm_counts.append(0)
            return
        pos, vel, acc, speed = world.state_arrays(slots)
        head = np.mod(np.arctan2(world._head[slots, 1], world._head[slots, 0]), TWO_PI)
        head = np.where(head >= TWO_PI, 0.0, head)
        elapsed = t - self._b_time[slots]
        kinds = world.kinds(slots)
        is_ped = kinds == int(EntityKind.PEDESTRIAN)
        args = (elapsed, pos, self._b_pos[slots], speed, self._b_speed[slots], head, self._b_head[slots])
        emit = np.where(is_ped, emit_mask(self.pedestrian_policy, *args),
                        emit_mask(self.vehicle_policy, *args))
        idx = np.flatnonzero(emit)
        self.trace.bsm_ticks.append(t)
        self.trace.bsm_counts.append(len(idx))
        if len(idx) == 0:
            return
        es = slots[idx]
        self._b_time[es] = t
        self._b_pos[es] = pos[idx]
        self._b_speed[es] = speed[idx]
        self._b_head[es] = head[idx]
        ents = [world.entity_at(s) for s in es]
        if self.distributed:
            self._v2v(t, es, ents, pos[idx], vel[idx], acc[idx])
            return
        bsms = [Bsm(t, e.id, e.kind, float(p[0]), float(p[1]), float(sp), float(h),
                    float(a[0]), float(a[1]), e.length, e.width)
                for e, p, sp, h, a in zip(ents, pos[idx], speed[idx], head[idx], acc[idx]) if e.equipped]
        if bsms:
            self.queue.push(t + self.cfg.network.uplink_latency, DELIVERY, "bsm_batch", bsms, key=(0,))

    # -- centralized path -------------------------------------------------
    def _on_bsm_batch(self, ev: Event) -> None:
        alerts = self.detector.process_batch(ev.data, ev.time)
        down = self.cfg.network.downlink_latency
        for a in alerts:
            if a.recipient == a.tagged_id:
                self.trace.alerts.append(a)
                if self.keep_trace:
                    self.trace.event(a.issued_at, "alert", pair=[a.tagged_id, a.other_id],
                                     t_star=a.predicted_t_star, d_star=a.predicted_d_star)
            self.queue.push(a.issued_at + down, DELIVERY, "alert", a, key=(1, a.recipient))

    def _on_alert_delivery(self, ev: Event) -> None:
        self._deliver_alert(ev.data, ev.time)

    def _deliver_alert(self, a, t: float) -> None:
        e = self.world.entities.get(a.recipient)
        if e is None:
            return
        key = pair_key(a.tagged_id, a.other_id)
        self.trace.deliveries.append((t, a.recipient, key))
        if not self.live_braking:
            return
        sched = on_alert(e, t, self.reaction, cause=key)
        if sched is None:
            return
        e.episodes.append(sched)
        self.queue.push(sched.brake_start, BRAKE, "brake", e, key=(e.id,))

    def _on_brake(self, ev: Event) -> None:
        e = ev.data
        sched = e.braking
        if e.slot < 0 or sched is None:
            if sched is not None:
                e.episodes.remove(sched)
                e.braking = None
            return
        self.world.apply_brake(e, ev.time, sched.decel)
        if self.keep_trace:
            self.trace.event(ev.time, "brake", id=e.id, stop_time=sched.stop_time)

    # -- distributed path -------------------------------------------------
    def _v2v(self, t, es, ents, pos, vel, acc) -> None:
        world = self.world
        tx_sel = np.array([e.equipped and e.kind == EntityKind.VEHICLE for e in ents], dtype=bool)
        if not tx_sel.any():
            return
        slots = world.active_slots()
        rx_all = np.array([s for s in slots if world.entity_at(s).equipped
                           and world.entity_at(s).kind == EntityKind.VEHICLE], dtype=np.int64)
        if len(rx_all) == 0:
            return
        tx = es[tx_sel]
        tpos, tvel, tacc = pos[tx_sel], vel[tx_sel], acc[tx_sel]
        ti, ri = np.meshgrid(np.arange(len(tx)), np.arange(len(rx_all)), indexing="ij")
        ti, ri = ti.ravel(), ri.ravel()
        rx = rx_all[ri]
        other = rx != tx[ti]
        ti, rx = ti[other], rx[other]
        rpos = world.positions_of(rx)
        d = np.hypot(*(tpos[ti] - rpos).T)
        los = los_mask(tpos[ti], rpos, self.boxes)
        ok = self.cfg.link.delivered(d, los, self.fading)
        ti, rx = ti[ok], rx[ok]
        self.onboard.receive(rx, tx[ti], tpos[ti], tvel[ti], tacc[ti], t)
        # pairs to evaluate: fresh receptions, plus every sender heard so far by a vehicle that just beaconed
        hr, ht = self.onboard.heard_fresh(tx, t)
        cap = 1 << 32
        codes = np.unique(np.concatenate([rx * cap + tx[ti], hr * cap + ht]))
        prx, ptx = codes // cap, codes % cap
        live = world._active[ptx]
        prx, ptx = prx[live], ptx[live]
        opos, ovel, oacc, _ = world.state_arrays(prx)
        for a in self.onboard.check(t, prx, ptx, opos, ovel, oacc):
            self.trace.alerts.append(a)
            self._deliver_alert(a, t)

    # -- report -----------------------------------------------------------
    def _report(self) -> RunReport:
        cfg = self.cfg
        dur = cfg.duration_s
        world = self.world
        entities = {e.id: e for e in world.history}
        alerted = {key for _, _, key in self.trace.deliveries}
        # contacts after the end only matter for pairs that were alerted in time
        contacts = [c for c in world.contacts if c.time <= dur or c.pair in alerted]
        global_contacts = None
        if cfg.ground_truth == "global" and self.live_braking:
            global_contacts = [c for c in counterfactual_contacts(world.history, self.params, self.tail_end)
                               if c.time <= dur or c.pair in alerted]
        records = classify(entities, contacts, self.trace.deliveries, self.tail_end, self.params.dt,
                           self.params.contact_model, cfg.ground_truth, global_contacts,
                           scope=cfg.reaction.scope, profile=self.reaction)
        ts, load = traffic_load(self.trace.bsm_ticks, cfg.metrics.load_window, dur,
                                weights=self.trace.bsm_counts)
        warm = cfg.metrics.warmup_s
        pop = np.array(self.trace.population).reshape(-1, 3)
        sel = pop[:, 0] >= warm
        spawned = {}
        for e in world.history:
            spawned[e.kind.label] = spawned.get(e.kind.label, 0) + 1
        return RunReport(
            seed=self.seed,
            duration_s=dur,
            config=cfg.to_dict(),
            records=records,
            bsm_total=int(sum(self.trace.bsm_counts)),
            load_times=[round(float(x), 6) for x in ts],
            load_series=[float(x) for x in load],
            load_steady=steady_mean(ts, load, warm),
            vehicle_population=float(pop[sel, 1].mean()) if sel.any() else None,
            pedestrian_population=float(pop[sel, 2].mean()) if sel.any() else None,
            entities_spawned=dict(sorted(spawned.items())),
            actual_contacts=sum(c.time <= dur for c in world.contacts),
            alerts_issued=len(self.trace.alerts),
            alert_deliveries=len(self.trace.deliveries),
        )


def run(cfg: ScenarioConfig, seed: int | None = None, trace: bool = False) -> tuple[Trace, RunReport]:
    """Execute one scenario and return its trace and KPI report."""
    sim = Simulation(cfg, seed, trace)
    out = sim.run()
    out[1].config["scenario"]["master_seed"] = sim.seed
    return out
