"""Scenario world: topology, routes, analytic trajectories, spawning and contacts.

Every entity follows a polyline route with a piecewise speed profile
(cruise, constant deceleration to rest, cruise again after resuming), so its
position is known in closed form at any time.  The :class:`World` keeps the
current profile segment of every live entity in flat arrays and advances
them together each tick.
"""

from __future__ import annotations

import bisect
import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from mecavoid.messages import EntityKind, pair_key

# slack added to the per-tick chord test, covers corner cutting and braking curvature
CHORD_SLACK = 0.1
# samples per contact search window and bisection steps for the first-contact time
FINE_SAMPLES = 21
REFINE_SAMPLES = 33
REFINE_ROUNDS = 2


@dataclass(frozen=True)
class Lane:
    id: str
    kind: EntityKind
    start: tuple[float, float]
    end: tuple[float, float]

    def __post_init__(self):
        if self.length <= 0:
            raise ValueError(f"lane {self.id} has zero length")

    @property
    def length(self) -> float:
        return math.hypot(self.end[0] - self.start[0], self.end[1] - self.start[1])

    def project(self, p) -> tuple[float, float]:
        """(offset along the lane, perpendicular distance) of point ``p``."""
        dx, dy = self.end[0] - self.start[0], self.end[1] - self.start[1]
        L = self.length
        ux, uy = dx / L, dy / L
        rx, ry = p[0] - self.start[0], p[1] - self.start[1]
        return rx * ux + ry * uy, abs(rx * uy - ry * ux)


@dataclass(frozen=True)
class Ingress:
    label: str
    lane_id: str
    rate: float

    def __post_init__(self):
        if not self.rate >= 0:
            raise ValueError(f"ingress {self.label}: rate must be >= 0")


class Route:
    """Polyline with arc-length parameterisation."""

    def __init__(self, points, lane_id: str):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError("route needs at least two points")
        seg = np.diff(pts, axis=0)
        lengths = np.hypot(seg[:, 0], seg[:, 1])
        keep = lengths > 0
        if not keep.any():
            raise ValueError("route has zero length")
        pts = np.vstack([pts[:1], pts[1:][keep]])
        seg = np.diff(pts, axis=0)
        self.points = pts
        self.lengths = np.hypot(seg[:, 0], seg[:, 1])
        self.dirs = seg / self.lengths[:, None]
        self.cum = np.concatenate([[0.0], np.cumsum(self.lengths)])
        self.total = float(self.cum[-1])
        self.lane_id = lane_id

    @property
    def n_segments(self) -> int:
        return len(self.lengths)

    def _index(self, s):
        k = np.searchsorted(self.cum, s, side="right") - 1
        return np.minimum(np.maximum(k, 0), self.n_segments - 1)

    def place(self, s):
        """Point and unit direction at arc length ``s`` (clamped to the route)."""
        s = np.minimum(np.maximum(np.asarray(s, dtype=float), 0.0), self.total)
        k = self._index(s)
        return self.points[k] + self.dirs[k] * (s - self.cum[k])[..., None], self.dirs[k]

    def position_at(self, s):
        return self.place(s)[0]

    def direction_at(self, s):
        return self.place(s)[1]


@dataclass(frozen=True)
class Topology:
    lanes: dict
    ingresses: tuple
    crossings: tuple = ()

    def __post_init__(self):
        for ing in self.ingresses:
            if ing.lane_id not in self.lanes:
                raise ValueError(f"ingress {ing.label} references unknown lane {ing.lane_id}")
        for c in self.crossings:
            if c not in self.lanes:
                raise ValueError(f"crossing references unknown lane {c}")

    @classmethod
    def parse(cls, text: str) -> Topology:
        sections: dict[str, list[list[str]]] = {}
        current = None
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1].strip().lower()
                sections[current] = []
                continue
            if current is None:
                raise ValueError(f"topology line outside a section: {raw!r}")
            sections[current].append([c.strip() for c in next(csv.reader([line]))])

        def body(name, header):
            rows = sections.get(name, [])
            if rows and rows[0] == header:
                rows = rows[1:]
            return rows

        lanes = {}
        for row in body("lanes", ["id", "kind", "x1", "y1", "x2", "y2"]):
            lid, kind, x1, y1, x2, y2 = row
            lanes[lid] = Lane(lid, EntityKind.parse(kind), (float(x1), float(y1)), (float(x2), float(y2)))
        ingresses = tuple(Ingress(lab, lid, float(rate))
                          for lab, lid, rate in body("ingresses", ["label", "lane_id", "rate"]))
        crossings = tuple(r[0] for r in body("crossings", ["lane_id"]))
        return cls(lanes, ingresses, crossings)

    @classmethod
    def load(cls, path) -> Topology:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"topology file not found: {p}")
        return cls.parse(p.read_text())

    def dumps(self) -> str:
        out = io.StringIO()
        out.write("[lanes]\nid,kind,x1,y1,x2,y2\n")
        for ln in self.lanes.values():
            out.write(f"{ln.id},{ln.kind.label},{ln.start[0]:g},{ln.start[1]:g},{ln.end[0]:g},{ln.end[1]:g}\n")
        out.write("[ingresses]\nlabel,lane_id,rate\n")
        for ing in self.ingresses:
            out.write(f"{ing.label},{ing.lane_id},{ing.rate:g}\n")
        out.write("[crossings]\nlane_id\n")
        for c in self.crossings:
            out.write(f"{c}\n")
        return out.getvalue()

    def with_rates(self, vehicle_rate=None, pedestrian_rate=None) -> Topology:
        """Copy with every vehicle (pedestrian) ingress rate replaced, when given."""
        ings = []
        for ing in self.ingresses:
            kind = self.lanes[ing.lane_id].kind
            rate = ing.rate
            if kind == EntityKind.VEHICLE and vehicle_rate is not None:
                rate = vehicle_rate
            if kind == EntityKind.PEDESTRIAN and pedestrian_rate is not None:
                rate = pedestrian_rate
            ings.append(Ingress(ing.label, ing.lane_id, rate))
        return Topology(self.lanes, tuple(ings), self.crossings)

    def kind_of(self, ingress: Ingress) -> EntityKind:
        return self.lanes[ingress.lane_id].kind

    def route_options(self, ingress: Ingress) -> list[Route]:
        """Vehicles keep their lane; pedestrians walk to one of the crossings ahead and take it."""
        lane = self.lanes[ingress.lane_id]
        if lane.kind == EntityKind.VEHICLE:
            return [Route([lane.start, lane.end], lane.id)]
        opts = []
        for cid in self.crossings:
            c = self.lanes[cid]
            s, off = lane.project(c.start)
            if off <= 0.5 and 0.0 <= s <= lane.length:
                opts.append((s, Route([lane.start, c.start, c.end], lane.id)))
        if not opts:
            return [Route([lane.start, lane.end], lane.id)]
        return [r for _, r in sorted(opts, key=lambda x: x[0])]


def default_topology_path() -> Path:
    return Path(__file__).parent / "data" / "default.topo"


@dataclass(frozen=True)
class MotionSegment:
    """From ``t0``: s = s0 + v0*tau + a*tau^2/2 until ``t_end``, then the end speed is held."""

    t0: float
    s0: float
    v0: float
    a: float = 0.0
    t_end: float = math.inf

    @property
    def end_speed(self) -> float:
        if math.isinf(self.t_end):
            return self.v0
        return max(self.v0 + self.a * (self.t_end - self.t0), 0.0)


class Trajectory:
    """Route plus piecewise speed profile; positions are exact at any time."""

    def __init__(self, route: Route, spawn_time: float, max_speed: float, segments=None):
        self.route = route
        self.spawn_time = spawn_time
        self.max_speed = max_speed
        self.segments: list[MotionSegment] = list(segments or [MotionSegment(spawn_time, 0.0, max_speed)])
        self._t0s = [sg.t0 for sg in self.segments]

    def _seg(self, t: float) -> MotionSegment:
        return self.segments[max(bisect.bisect_right(self._t0s, t) - 1, 0)]

    @staticmethod
    def _eval(sg: MotionSegment, t: float):
        u = max(t - sg.t0, 0.0)
        tau = min(u, sg.t_end - sg.t0)
        v = sg.v0 + sg.a * tau
        return sg.s0 + sg.v0 * tau + 0.5 * sg.a * tau * tau + v * (u - tau), v

    def s_at(self, t: float) -> float:
        return self._eval(self._seg(t), t)[0]

    def speed_at(self, t: float) -> float:
        return max(self._eval(self._seg(t), t)[1], 0.0)

    def accel_at(self, t: float) -> float:
        sg = self._seg(t)
        return sg.a if t < sg.t_end else 0.0

    def s_array(self, times):
        times = np.asarray(times, dtype=float)
        t0 = np.array(self._t0s)
        k = np.minimum(np.maximum(np.searchsorted(t0, times, side="right") - 1, 0), len(t0) - 1)
        s0 = np.array([sg.s0 for sg in self.segments])[k]
        v0 = np.array([sg.v0 for sg in self.segments])[k]
        a = np.array([sg.a for sg in self.segments])[k]
        span = np.array([sg.t_end - sg.t0 for sg in self.segments])[k]
        u = np.maximum(times - t0[k], 0.0)
        tau = np.minimum(u, span)
        v = np.maximum(v0 + a * tau, 0.0)
        return s0 + v0 * tau + 0.5 * a * tau * tau + v * (u - tau)

    def positions(self, times):
        s = self.s_array(times)
        return self.route.place(s)

    def exit_time(self) -> float:
        """Time the route end is reached; inf if the profile stops short of it."""
        sg = self.segments[-1]
        rem = self.route.total - sg.s0
        if rem <= 0:
            return sg.t0
        if sg.a == 0.0:
            return sg.t0 + rem / sg.v0 if sg.v0 > 0 else math.inf
        disc = sg.v0 * sg.v0 + 2.0 * sg.a * rem
        if disc >= 0:
            tau = (-sg.v0 + math.sqrt(disc)) / sg.a if sg.a > 0 else (sg.v0 - math.sqrt(disc)) / -sg.a
            if sg.t0 + tau <= sg.t_end:
                return sg.t0 + tau
        v_end = sg.end_speed
        if v_end <= 0:
            return math.inf
        s_end, _ = self._eval(sg, sg.t_end)
        return sg.t_end + (self.route.total - s_end) / v_end

    def _truncate(self, t: float) -> None:
        while self.segments and self.segments[-1].t0 >= t and len(self.segments) > 1:
            self.segments.pop()
        self._t0s = [sg.t0 for sg in self.segments]

    def add_brake(self, t: float, decel: float) -> MotionSegment:
        s, v = self._eval(self._seg(t), t)
        v = max(v, 0.0)
        self._truncate(t)
        sg = MotionSegment(t, s, v, -decel, t + v / decel)
        self.segments.append(sg)
        self._t0s.append(t)
        return sg

    def add_resume(self, t: float, accel: float = math.inf) -> MotionSegment:
        """Return to max speed from ``t``, instantly or with constant ``accel``."""
        s, v = self._eval(self._seg(t), t)
        v = max(v, 0.0)
        self._truncate(t)
        if math.isinf(accel) or v >= self.max_speed:
            sg = MotionSegment(t, s, self.max_speed)
        else:
            sg = MotionSegment(t, s, v, accel, t + (self.max_speed - v) / accel)
        self.segments.append(sg)
        self._t0s.append(t)
        return sg

    def ablated(self, t: float) -> Trajectory:
        """Same motion up to ``t``, then cruise at max speed as if never braked after it."""
        s = self.s_at(t)
        segs = [sg for sg in self.segments if sg.t0 < t]
        segs.append(MotionSegment(t, s, self.max_speed))
        return Trajectory(self.route, self.spawn_time, self.max_speed, segs)

    def unbraked(self) -> Trajectory:
        return Trajectory(self.route, self.spawn_time, self.max_speed)


@dataclass(frozen=True)
class MobilityParams:
    dt: float = 0.1
    vehicle_speed: float = 13.89
    pedestrian_speed: float = 2.0
    vehicle_length: float = 5.0
    vehicle_width: float = 1.8
    pedestrian_length: float = 0.5
    pedestrian_width: float = 0.5
    min_headway: float = 1.0
    contact_model: str = "box"
    resume_delay: float = 2.0
    max_wait: float = 30.0
    entry_clearance: float = 150.0
    resume_accel: float = 2.0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.contact_model not in ("box", "disc"):
            raise ValueError(f"contact_model must be box or disc, got {self.contact_model!r}")
        if min(self.vehicle_speed, self.pedestrian_speed) <= 0:
            raise ValueError("speeds must be positive")
        if not self.resume_accel > 0:
            raise ValueError("resume_accel must be positive (inf for an instant restart)")
        if self.entry_clearance < 0:
            raise ValueError("entry_clearance must be >= 0")

    def speed(self, kind: EntityKind) -> float:
        return self.pedestrian_speed if kind == EntityKind.PEDESTRIAN else self.vehicle_speed

    def dims(self, kind: EntityKind) -> tuple[float, float]:
        if kind == EntityKind.PEDESTRIAN:
            return self.pedestrian_length, self.pedestrian_width
        return self.vehicle_length, self.vehicle_width


@dataclass(eq=False)
class Entity:
    id: int
    kind: EntityKind
    ingress: str
    trajectory: Trajectory
    length: float
    width: float
    equipped: bool = True
    braking: object = None  # pending or active BrakingSchedule
    episodes: list = field(default_factory=list)
    slot: int = -1
    exit_time: float | None = None
    stopped_since: float | None = None

    @property
    def max_speed(self) -> float:
        return self.trajectory.max_speed

    @property
    def spawn_time(self) -> float:
        return self.trajectory.spawn_time

    @property
    def lane_id(self) -> str:
        return self.trajectory.route.lane_id

    def offset(self, t: float) -> float:
        return self.trajectory.s_at(t)

    def speed(self, t: float) -> float:
        return self.trajectory.speed_at(t)

    def end_time(self, horizon: float) -> float:
        return min(self.exit_time if self.exit_time is not None else math.inf, horizon)


class SpawnProcess:
    """Poisson arrivals for one ingress."""

    def __init__(self, ingress: Ingress, rng: np.random.Generator):
        self.ingress = ingress
        self.rng = rng

    def next_arrival(self, after: float) -> float:
        if self.ingress.rate <= 0:
            return math.inf
        return after + float(self.rng.exponential(1.0 / self.ingress.rate))

    def arrivals(self, until: float) -> list[float]:
        out, t = [], 0.0
        while True:
            t = self.next_arrival(t)
            if t > until:
                return out
            out.append(t)


@dataclass(frozen=True)
class Contact:
    pair: tuple
    time: float
    x: float
    y: float


def overlap(pa, ha, la, wa, pb, hb, lb, wb, model: str = "box"):
    """Whether bodies overlap (touching counts).  Arrays broadcast over samples.

    ``p*`` are centres, ``h*`` unit heading vectors, ``l*``/``w*`` length/width.
    """
    d = pb - pa
    if model == "disc":
        ra = 0.5 * np.maximum(la, wa)
        rb = 0.5 * np.maximum(lb, wb)
        return np.hypot(d[..., 0], d[..., 1]) <= ra + rb
    dx, dy = d[..., 0], d[..., 1]
    hax, hay, hbx, hby = ha[..., 0], ha[..., 1], hb[..., 0], hb[..., 1]
    # separating axes are the two bodies' own axes; with unit headings every
    # cross projection is |cos| or |sin| of the relative angle
    c = np.abs(hax * hbx + hay * hby)
    s = np.abs(hax * hby - hay * hbx)
    la, wa, lb, wb = 0.5 * la, 0.5 * wa, 0.5 * lb, 0.5 * wb
    sep = np.abs(dx * hax + dy * hay) > la + lb * c + wb * s
    sep |= np.abs(dy * hax - dx * hay) > wa + lb * s + wb * c
    sep |= np.abs(dx * hbx + dy * hby) > lb + la * c + wa * s
    sep |= np.abs(dy * hbx - dx * hby) > wb + la * s + wa * c
    return ~sep


def bound_radius(length, width, model: str = "box"):
    """Radius of a disc enclosing the body (its contact reach from the centre)."""
    if model == "disc":
        return 0.5 * np.maximum(length, width)
    return 0.5 * np.hypot(length, width)


def first_overlap(sample, lo, hi, la, wa, lb, wb, model: str):
    """Earliest overlap time in each window ``[lo[i], hi[i]]`` (nan where none).

    ``sample(rows, times)`` maps window indices ``rows`` (m,) and an
    ``(m, k)`` array of times to ``(pa, ha, pb, hb)`` centres and headings of shape
    ``(n, k, 2)``.  Each window is sampled, then the first overlapping
    sample interval is resampled twice, which pins the time to a few
    microseconds for a 0.1 s window.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    out = np.full(len(lo), np.nan)
    if len(lo) == 0:
        return out
    dims = [np.broadcast_to(np.asarray(x, dtype=float), lo.shape) for x in (la, wa, lb, wb)]

    def hits(rows, times):
        pa, ha, pb, hb = sample(rows, times)
        la_, wa_, lb_, wb_ = (d[rows][:, None] for d in dims)
        return overlap(pa, ha, la_, wa_, pb, hb, lb_, wb_, model)

    rows = np.arange(len(lo))
    u = np.linspace(0.0, 1.0, FINE_SAMPLES)
    times = lo[:, None] + (hi - lo)[:, None] * u
    hit = hits(rows, times)
    found = hit.any(axis=1)
    rows, times, hit = rows[found], times[found], hit[found]
    k = np.argmax(hit, axis=1)
    r = np.arange(len(rows))
    t_hit = times[r, k]
    at_start = k == 0
    out[rows[at_start]] = t_hit[at_start]
    rows, t_hit, t_prev = rows[~at_start], t_hit[~at_start], times[r, np.maximum(k - 1, 0)][~at_start]
    u = np.linspace(0.0, 1.0, REFINE_SAMPLES)
    for _ in range(REFINE_ROUNDS):
        if len(rows) == 0:
            break
        times = t_prev[:, None] + (t_hit - t_prev)[:, None] * u
        times[:, -1] = t_hit  # the right end is known to overlap
        hit = hits(rows, times)
        hit[:, -1] = True
        k = np.argmax(hit, axis=1)
        r = np.arange(len(rows))
        t_hit, t_prev = times[r, k], times[r, np.maximum(k - 1, 0)]
    out[rows] = t_hit
    return out


def _trajectory_sampler(ta: Trajectory, tb: Trajectory):
    def sample(rows, times):
        pa, ha = ta.positions(times)
        pb, hb = tb.positions(times)
        return pa, ha, pb, hb
    return sample


def first_contact_in(ea: Entity, eb: Entity, t0: float, t1: float, model: str,
                     ta: Trajectory | None = None, tb: Trajectory | None = None):
    """Earliest contact time of two bodies within ``[t0, t1]`` or None (error well under 1 ms)."""
    ta = ta or ea.trajectory
    tb = tb or eb.trajectory
    if t1 < t0:
        return None
    t = first_overlap(_trajectory_sampler(ta, tb), [t0], [t1], ea.length, ea.width,
                      eb.length, eb.width, model)[0]
    return None if np.isnan(t) else float(t)


def _chord_min(pa0, pa1, pb0, pb1):
    """Minimum distance between two points moving linearly over a common window."""
    p = pa0 - pb0
    dd = (pa1 - pb1) - p
    dd2 = np.sum(dd * dd, axis=-1)
    u = np.where(dd2 > 0, np.clip(-np.sum(p * dd, axis=-1) / np.where(dd2 > 0, dd2, 1.0), 0.0, 1.0), 0.0)
    q = p + dd * u[..., None]
    return np.hypot(q[..., 0], q[..., 1])


def pair_first_contact(ea: Entity, eb: Entity, t_start: float, t_end: float, dt: float,
                       model: str, ta: Trajectory | None = None, tb: Trajectory | None = None):
    """First contact of two trajectories over ``[t_start, t_end]`` on the tick grid.

    Uses the same windows, chord screen and fine search as :class:`World`, so
    an unmodified pair gets exactly the contact time the live world records.
    """
    ta = ta or ea.trajectory
    tb = tb or eb.trajectory
    if t_end < t_start:
        return None
    k0 = math.floor(t_start / dt + 1e-9)
    k1 = math.ceil(t_end / dt - 1e-9)
    grid = np.arange(k0, k1 + 1) * dt
    lo = np.maximum(grid[:-1], t_start)
    hi = np.minimum(grid[1:], t_end)
    ok = hi >= lo
    lo, hi = lo[ok], hi[ok]
    if len(lo) == 0:
        return None
    pa0, _ = ta.positions(lo)
    pa1, _ = ta.positions(hi)
    pb0, _ = tb.positions(lo)
    pb1, _ = tb.positions(hi)
    reach = (bound_radius(ea.length, ea.width, model) + bound_radius(eb.length, eb.width, model)
             + CHORD_SLACK)
    cand = np.flatnonzero(_chord_min(pa0, pa1, pb0, pb1) <= reach)
    if len(cand) == 0:
        return None
    t = first_overlap(_trajectory_sampler(ta, tb), lo[cand], hi[cand], ea.length, ea.width,
                      eb.length, eb.width, model)
    t = t[~np.isnan(t)]
    return float(t[0]) if len(t) else None


class World:
    """Live entities plus their current motion segment in column arrays."""

    def __init__(self, topology: Topology, params: MobilityParams, capacity: int = 256,
                 max_segments: int | None = None):
        self.topology = topology
        self.params = params
        self.time = 0.0
        self.entities: dict[int, Entity] = {}
        self.history: list[Entity] = []
        self.contacts: list[Contact] = []
        self._contacted: set = set()
        self._by_slot: list[Entity | None] = []
        self._free: list[int] = []
        self._last_spawn: dict[str, float] = {}
        self._lane_index: dict[str, int] = {}
        if max_segments is None:
            max_segments = max([1] + [r.n_segments for ing in topology.ingresses
                                      for r in topology.route_options(ing)])
        self._max_k = max_segments
        self._grow(capacity)

    # -- storage ---------------------------------------------------------
    def _grow(self, cap: int) -> None:
        old = len(self._by_slot)
        K = self._max_k

        def g(name, shape, fill=0.0, dtype=float):
            new = np.full((cap,) + shape, fill, dtype=dtype)
            arr = getattr(self, name, None)
            if arr is not None:
                new[:old] = arr
            setattr(self, name, new)

        for name in ("t0", "s0", "v0", "acc", "span", "total", "s", "v", "length", "width", "vmax"):
            g("_" + name, ())
        g("_pos", (2,))
        g("_prev", (2,))
        g("_prev_t", ())
        g("_head", (2,))
        g("_start", (2,))
        g("_dirs", (K, 2))
        g("_cum", (K + 1,), math.inf)
        g("_segl", (K,))
        g("_kind", (), 0, np.int8)
        g("_lane", (), -1, np.int32)
        g("_active", (), False, bool)
        self._by_slot.extend([None] * (cap - old))
        self._free.extend(range(cap - 1, old - 1, -1))

    def _write_segment(self, slot: int, sg: MotionSegment) -> None:
        self._t0[slot] = sg.t0
        self._s0[slot] = sg.s0
        self._v0[slot] = sg.v0
        self._acc[slot] = sg.a
        self._span[slot] = sg.t_end - sg.t0

    def add(self, e: Entity) -> None:
        if not self._free:
            self._grow(2 * len(self._by_slot))
        slot = self._free.pop()
        e.slot = slot
        self._by_slot[slot] = e
        self.entities[e.id] = e
        self.history.append(e)
        r = e.trajectory.route
        n = r.n_segments
        self._start[slot] = r.points[0]
        self._dirs[slot] = 0.0
        self._dirs[slot, :n] = r.dirs
        self._segl[slot] = 0.0
        self._segl[slot, :n] = r.lengths
        self._cum[slot] = math.inf
        self._cum[slot, :n + 1] = r.cum
        self._total[slot] = r.total
        self._length[slot] = e.length
        self._width[slot] = e.width
        self._vmax[slot] = e.max_speed
        self._kind[slot] = int(e.kind)
        self._lane[slot] = self._lane_index.setdefault(e.lane_id, len(self._lane_index))
        self._write_segment(slot, e.trajectory.segments[-1])
        t = e.spawn_time
        self._s[slot] = e.trajectory.s_at(t)
        self._v[slot] = e.trajectory.speed_at(t)
        self._pos[slot] = r.position_at(self._s[slot])
        self._head[slot] = r.direction_at(self._s[slot])
        self._prev[slot] = self._pos[slot]
        self._prev_t[slot] = t
        self._active[slot] = True
        self._last_spawn[e.lane_id] = t

    def _remove(self, slot: int) -> None:
        e = self._by_slot[slot]
        self._active[slot] = False
        self._by_slot[slot] = None
        self._free.append(slot)
        del self.entities[e.id]
        e.slot = -1

    def active_slots(self) -> np.ndarray:
        return np.flatnonzero(self._active)

    def entity_at(self, slot: int) -> Entity:
        return self._by_slot[slot]

    # -- motion ----------------------------------------------------------
    def _profile(self, slots, t):
        u = np.maximum(t - self._t0[slots], 0.0)
        tau = np.minimum(u, self._span[slots])
        v = np.maximum(self._v0[slots] + self._acc[slots] * tau, 0.0)
        s = self._s0[slots] + self._v0[slots] * tau + 0.5 * self._acc[slots] * tau * tau + v * (u - tau)
        return s, v

    def _place(self, slots, s):
        s = np.minimum(s, self._total[slots])
        cum = self._cum[slots]
        segl = self._segl[slots]
        # unused segment slots carry cum=inf and length 0, so they contribute nothing
        within = np.minimum(np.maximum(s[:, None] - cum[:, :-1], 0.0), segl)
        pos = self._start[slots] + np.einsum("nk,nkd->nd", within, self._dirs[slots])
        nseg = (segl > 0).sum(axis=1)
        k = np.minimum((s[:, None] >= cum[:, 1:]).sum(axis=1), nseg - 1)
        head = self._dirs[slots][np.arange(len(slots)), k]
        return pos, head

    def spawn_blocked_until(self, lane_id: str, kind: EntityKind, t: float) -> float | None:
        """None if a spawn on ``lane_id`` may happen at ``t``, else the next time to retry."""
        last = self._last_spawn.get(lane_id)
        if last is not None and t < last + self.params.min_headway - 1e-9:
            return last + self.params.min_headway
        lane = self._lane_index.get(lane_id)
        if kind != EntityKind.VEHICLE or lane is None:
            return None
        # a vehicle still near the entry, or a slowed one anywhere in the entry
        # zone, holds arrivals back (traffic queues outside the map)
        slots = self.active_slots()
        slots = slots[(self._lane[slots] == lane) & (self._kind[slots] == int(kind))]
        if len(slots) == 0:
            return None
        s, v = self._profile(slots, t)
        p = self.params
        near = s < p.vehicle_speed * p.min_headway
        slowed = (s < p.entry_clearance) & (v < self._vmax[slots] - 1e-9)
        if (near | slowed).any():
            return t + p.dt
        return None

    def step(self, dt: float) -> list[Contact]:
        if dt <= 0:
            raise ValueError("dt must be positive")
        return self.advance_to(self.time + dt)

    def advance_to(self, t: float) -> list[Contact]:
        """Move every live entity to time ``t``, record contacts, drop exited entities."""
        slots = self.active_slots()
        new_contacts: list[Contact] = []
        if len(slots):
            s, v = self._profile(slots, t)
            pos, head = self._place(slots, s)
            self._s[slots] = s
            self._v[slots] = v
            self._pos[slots] = pos
            self._head[slots] = head
            done = s >= self._total[slots]
            new_contacts = self._contacts(slots, t)
            for slot in slots[done]:
                e = self._by_slot[slot]
                e.exit_time = min(e.trajectory.exit_time(), t)
                self._remove(slot)
            self._prev[slots] = pos
            self._prev_t[slots] = t
        self.time = t
        return new_contacts

    def _contacts(self, slots, t) -> list[Contact]:
        model = self.params.contact_model
        mid = 0.5 * (self._prev[slots] + self._pos[slots])
        half_move = 0.5 * np.hypot(*(self._pos[slots] - self._prev[slots]).T)
        reach = bound_radius(self._length[slots], self._width[slots], model)
        r = 2.0 * float(reach.max() + half_move.max()) + CHORD_SLACK
        pairs = cKDTree(mid).query_pairs(r, output_type="ndarray")
        if len(pairs) == 0:
            return []
        i, j = slots[pairs[:, 0]], slots[pairs[:, 1]]
        ped = EntityKind.PEDESTRIAN
        keep = ~((self._kind[i] == ped) & (self._kind[j] == ped))
        i, j = i[keep], j[keep]
        t0 = np.maximum(self._prev_t[i], self._prev_t[j])
        d = _chord_min(self._prev[i], self._pos[i], self._prev[j], self._pos[j])
        near = d <= (bound_radius(self._length[i], self._width[i], model)
                     + bound_radius(self._length[j], self._width[j], model) + CHORD_SLACK)
        i, j, lo = i[near], j[near], t0[near]
        keys = [pair_key(self._by_slot[a].id, self._by_slot[b].id) for a, b in zip(i, j)]
        fresh = np.array([k not in self._contacted for k in keys], dtype=bool)
        if not fresh.any():
            return []
        i, j, lo = i[fresh], j[fresh], lo[fresh]
        keys = [k for k, f in zip(keys, fresh) if f]
        # segments that began inside the window (live braking) need the full trajectory
        whole = (self._t0[i] > lo) | (self._t0[j] > lo)
        tc = np.full(len(i), np.nan)
        easy = np.flatnonzero(~whole)
        if len(easy):
            hi = np.array([min(t, self._by_slot[x].trajectory.exit_time(), self._by_slot[y].trajectory.exit_time())
                           for x, y in zip(i[easy], j[easy])])
            ok = hi >= lo[easy]
            easy, hi = easy[ok], hi[ok]
        if len(easy):
            a, b = i[easy], j[easy]

            def sample(rows, times):
                pa, ha = self._positions_at(a[rows], times)
                pb, hb = self._positions_at(b[rows], times)
                return pa, ha, pb, hb

            tc[easy] = first_overlap(sample, lo[easy], hi, self._length[a],
                                     self._width[a], self._length[b], self._width[b], model)
        for n in np.flatnonzero(whole):
            ea, eb = self._by_slot[i[n]], self._by_slot[j[n]]
            hi = min(t, ea.trajectory.exit_time(), eb.trajectory.exit_time())
            hit = first_contact_in(ea, eb, float(lo[n]), hi, model)
            tc[n] = np.nan if hit is None else hit
        out = []
        for n in np.flatnonzero(~np.isnan(tc)):
            time = float(tc[n])
            pa, _ = self._by_slot[i[n]].trajectory.positions(np.array([time]))
            pb, _ = self._by_slot[j[n]].trajectory.positions(np.array([time]))
            c = Contact(keys[n], time, float(0.5 * (pa[0, 0] + pb[0, 0])), float(0.5 * (pa[0, 1] + pb[0, 1])))
            self._contacted.add(keys[n])
            out.append(c)
        out.sort(key=lambda c: (c.time, c.pair))
        self.contacts.extend(out)
        return out

    def _positions_at(self, slots, times):
        """Centres and headings of ``slots`` (n,) at ``times`` (n, k) from the current segments."""
        n, k = times.shape
        sl = np.repeat(slots, k)
        s, _ = self._profile(sl, times.ravel())
        pos, head = self._place(sl, s)
        return pos.reshape(n, k, 2), head.reshape(n, k, 2)

    # -- braking ---------------------------------------------------------
    def apply_brake(self, e: Entity, t: float, decel: float) -> None:
        sg = e.trajectory.add_brake(t, decel)
        if e.slot >= 0:
            self._write_segment(e.slot, sg)

    def resume(self, e: Entity, t: float) -> None:
        sg = e.trajectory.add_resume(t, self.params.resume_accel)
        if e.slot >= 0:
            self._write_segment(e.slot, sg)

    def state_arrays(self, slots):
        """Position, velocity, acceleration vectors and speeds of ``slots`` at the current time."""
        head = self._head[slots]
        v = self._v[slots]
        t = self.time
        braking = (self._acc[slots] != 0) & (t < self._t0[slots] + self._span[slots]) & (t >= self._t0[slots])
        a = np.where(braking, self._acc[slots], 0.0)
        return self._pos[slots], head * v[:, None], head * a[:, None], v

    def kinds(self, slots) -> np.ndarray:
        return self._kind[slots]

    def dims(self, slots):
        return self._length[slots], self._width[slots]

    def positions_of(self, slots):
        return self._pos[slots]


def counterfactual_contacts(entities, params: MobilityParams, horizon: float,
                            topology: Topology | None = None) -> list[Contact]:
    """Replay every entity unbraked from its spawn and return the contacts that occur.

    ``entities`` is the spawn log (any objects with the :class:`Entity`
    fields).  The replay uses the same tick grid and contact search as the
    live world.
    """
    topo = topology or Topology({}, ())
    world = World(topo, params, capacity=64,
                  max_segments=max([1] + [e.trajectory.route.n_segments for e in entities]))
    ghosts = sorted((Entity(e.id, e.kind, e.ingress, e.trajectory.unbraked(), e.length, e.width,
                            e.equipped) for e in entities), key=lambda g: (g.spawn_time, g.id))
    dt = params.dt
    n_ticks = int(math.floor(horizon / dt + 1e-9))
    nxt = 0
    for k in range(1, n_ticks + 1):
        t = k * dt
        while nxt < len(ghosts) and ghosts[nxt].spawn_time <= t:
            world.add(ghosts[nxt])
            nxt += 1
        world.advance_to(t)
    return sorted(world.contacts, key=lambda c: (c.time, c.pair))
