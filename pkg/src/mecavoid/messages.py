"""Beacon and alert messages, plus the detector-side neighbor table."""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass

import numpy as np

from mecavoid.kinematics import KinematicState, Vec2

TWO_PI = 2.0 * math.pi

# ages are differences of tick-derived times; an age of exactly max_age must count as fresh
AGE_TOL = 1e-9


class EntityKind(enum.IntEnum):
    VEHICLE = 0
    PEDESTRIAN = 1

    @classmethod
    def parse(cls, text: str) -> EntityKind:
        return cls[text.strip().upper()]

    @property
    def label(self) -> str:
        return self.name.lower()


class MalformedBsm(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class Bsm:
    """Basic safety message.  Field order matches the CSV serialization."""

    generated_at: float
    sender_id: int
    kind: EntityKind
    x: float
    y: float
    speed: float
    heading: float
    ax: float = 0.0
    ay: float = 0.0
    length: float = 5.0
    width: float = 1.8

    @property
    def position(self) -> Vec2:
        return Vec2(self.x, self.y)

    @property
    def acceleration(self) -> Vec2:
        return Vec2(self.ax, self.ay)

    @property
    def velocity(self) -> Vec2:
        return Vec2(self.speed * math.cos(self.heading), self.speed * math.sin(self.heading))

    def state(self) -> KinematicState:
        return KinematicState(self.position, self.velocity, self.acceleration, self.generated_at)

    def problems(self) -> list[str]:
        out = []
        nums = (self.generated_at, self.x, self.y, self.speed, self.heading,
                self.ax, self.ay, self.length, self.width)
        if not all(math.isfinite(v) for v in nums):
            out.append("non-finite field")
            return out
        if self.speed < 0:
            out.append("speed < 0")
        if self.length <= 0 or self.width <= 0:
            out.append("non-positive dimensions")
        if not 0.0 <= self.heading < TWO_PI:
            out.append("heading outside [0, 2pi)")
        if self.generated_at < 0:
            out.append("negative generation time")
        return out

    def validate(self) -> None:
        issues = self.problems()
        if issues:
            raise MalformedBsm(f"BSM from {self.sender_id}: " + ", ".join(issues))


BSM_CSV_HEADER = ["generated_at", "sender_id", "kind", "x", "y", "speed", "heading",
                  "ax", "ay", "length", "width"]


def bsm_to_row(b: Bsm) -> list:
    return [repr(b.generated_at), b.sender_id, b.kind.label, repr(b.x), repr(b.y),
            repr(b.speed), repr(b.heading), repr(b.ax), repr(b.ay), repr(b.length), repr(b.width)]


def bsm_from_row(row) -> Bsm:
    g, sid, kind, x, y, sp, hd, ax, ay, ln, wd = row
    return Bsm(float(g), int(sid), EntityKind.parse(kind), float(x), float(y), float(sp),
               float(hd), float(ax), float(ay), float(ln), float(wd))


def write_bsm_csv(bsms, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(BSM_CSV_HEADER)
    for b in bsms:
        w.writerow(bsm_to_row(b))


def read_bsm_csv(fh) -> list[Bsm]:
    if isinstance(fh, str):
        fh = io.StringIO(fh)
    r = csv.reader(fh)
    header = next(r)
    if header != BSM_CSV_HEADER:
        raise ValueError(f"unexpected BSM header {header}")
    return [bsm_from_row(row) for row in r if row]


@dataclass(frozen=True, slots=True)
class Alert:
    """Collision warning about ``(tagged_id, other_id)`` addressed to ``recipient``."""

    tagged_id: int
    other_id: int
    recipient: int
    predicted_t_star: float
    predicted_d_star: float
    issued_at: float

    @property
    def pair(self) -> tuple[int, int]:
        return (self.tagged_id, self.other_id)


def pair_key(a, b) -> tuple:
    return (a, b) if a <= b else (b, a)


class NeighborTable:
    """Latest BSM per sender, stored column-wise so the detector can screen in bulk.

    ``_x, _y, _vx, ...`` are indexed by slot; ``_valid`` marks live slots.
    """

    def __init__(self, capacity: int = 64):
        self._slot: dict = {}
        self._free: list[int] = []
        self._bsm: list[Bsm | None] = []
        self._recv: list[float] = []
        self._alloc(capacity)

    def _alloc(self, cap: int) -> None:
        old = len(self._bsm)
        def grow(arr, dtype, fill=0):
            new = np.full(cap, fill, dtype=dtype)
            if arr is not None:
                new[:old] = arr
            return new
        g = lambda name, dt, fill=0: grow(getattr(self, name, None), dt, fill)  # noqa: E731
        self._x = g("_x", float)
        self._y = g("_y", float)
        self._vx = g("_vx", float)
        self._vy = g("_vy", float)
        self._ax = g("_ax", float)
        self._ay = g("_ay", float)
        self._gen = g("_gen", float)
        self._kind = g("_kind", np.int8)
        self._sender = g("_sender", np.int64, -1)
        self._valid = g("_valid", bool, False)
        self._bsm.extend([None] * (cap - old))
        self._recv.extend([0.0] * (cap - old))
        self._free.extend(range(cap - 1, old - 1, -1))

    def __len__(self) -> int:
        return len(self._slot)

    def __contains__(self, sender) -> bool:
        return sender in self._slot

    def get(self, sender):
        slot = self._slot.get(sender)
        if slot is None:
            return None
        return self._bsm[slot], self._recv[slot]

    def records(self) -> list[tuple[Bsm, float]]:
        return [(self._bsm[s], self._recv[s]) for _, s in sorted(self._slot.items())]

    def senders(self) -> list:
        return sorted(self._slot)

    def upsert(self, bsm: Bsm, received_at: float) -> bool:
        """Store ``bsm`` unless an equal-or-newer one from the same sender is held."""
        slot = self._slot.get(bsm.sender_id)
        if slot is not None:
            if self._bsm[slot].generated_at >= bsm.generated_at:
                return False
        else:
            if not self._free:
                self._alloc(2 * len(self._bsm))
            slot = self._free.pop()
            self._slot[bsm.sender_id] = slot
        self._bsm[slot] = bsm
        self._recv[slot] = received_at
        c, s = math.cos(bsm.heading), math.sin(bsm.heading)
        self._x[slot] = bsm.x
        self._y[slot] = bsm.y
        self._vx[slot] = bsm.speed * c
        self._vy[slot] = bsm.speed * s
        self._ax[slot] = bsm.ax
        self._ay[slot] = bsm.ay
        self._gen[slot] = bsm.generated_at
        self._kind[slot] = int(bsm.kind)
        self._sender[slot] = bsm.sender_id
        self._valid[slot] = True
        return True

    def upsert_many(self, bsms, received_at: float) -> int:
        """:meth:`upsert` for BSMs from distinct senders; returns how many were stored."""
        taken = []
        for b in bsms:
            slot = self._slot.get(b.sender_id)
            if slot is not None:
                if self._bsm[slot].generated_at >= b.generated_at:
                    continue
            else:
                if not self._free:
                    self._alloc(2 * len(self._bsm))
                slot = self._free.pop()
                self._slot[b.sender_id] = slot
            self._bsm[slot] = b
            self._recv[slot] = received_at
            taken.append((slot, b))
        if not taken:
            return 0
        slots = np.array([s for s, _ in taken])
        g, x, y, sp, hd, ax, ay, kind = np.array(
            [(b.generated_at, b.x, b.y, b.speed, b.heading, b.ax, b.ay, int(b.kind))
             for _, b in taken], dtype=float).T
        self._x[slots] = x
        self._y[slots] = y
        self._vx[slots] = sp * np.cos(hd)
        self._vy[slots] = sp * np.sin(hd)
        self._ax[slots] = ax
        self._ay[slots] = ay
        self._gen[slots] = g
        self._kind[slots] = kind
        self._sender[slots] = [b.sender_id for _, b in taken]
        self._valid[slots] = True
        return len(taken)

    def remove(self, sender) -> None:
        slot = self._slot.pop(sender, None)
        if slot is not None:
            self._valid[slot] = False
            self._bsm[slot] = None
            self._free.append(slot)

    def prune(self, now: float, max_age: float) -> int:
        """Drop records older than ``max_age`` (age exactly ``max_age`` is kept)."""
        if max_age <= 0:
            raise ValueError("max_age must be positive")
        stale = self._valid & (now - self._gen > max_age + AGE_TOL)
        if not stale.any():
            return 0
        slots = np.flatnonzero(stale)
        for slot in slots:
            del self._slot[self._bsm[slot].sender_id]
            self._bsm[slot] = None
            self._free.append(int(slot))
        self._valid[slots] = False
        return len(slots)

    def snapshot(self, now: float):
        """Valid slots plus their states extrapolated to ``now``."""
        slots = np.flatnonzero(self._valid)
        tau = now - self._gen[slots]
        ax, ay = self._ax[slots], self._ay[slots]
        pos = np.column_stack([self._x[slots] + self._vx[slots] * tau + 0.5 * ax * tau * tau,
                               self._y[slots] + self._vy[slots] * tau + 0.5 * ay * tau * tau])
        vel = np.column_stack([self._vx[slots] + ax * tau, self._vy[slots] + ay * tau])
        acc = np.column_stack([ax, ay])
        return slots, pos, vel, acc, self._kind[slots]

    def bsm_at(self, slot: int) -> Bsm:
        return self._bsm[slot]

    def sender_ids(self, slots) -> np.ndarray:
        return self._sender[slots]

    def candidates(self, tagged: Bsm, horizon: float, max_speed_sum: float,
                   allowance: float = 5.0) -> list[Bsm]:
        """Records that could still come within ``allowance`` of ``tagged`` in ``horizon``.

        Neighbor states are first extrapolated to the tagged BSM's generation time.
        """
        if horizon <= 0:
            raise ValueError("horizon must be positive")
        tstate = tagged.state()
        slots, pos, vel, acc, _ = self.snapshot(tagged.generated_at)
        keep = candidate_mask(
            np.array([tstate.position.x, tstate.position.y]),
            np.array([tstate.velocity.x, tstate.velocity.y]),
            np.array([tagged.ax, tagged.ay]),
            pos, vel, acc, horizon, max_speed_sum, allowance)
        own = self._slot.get(tagged.sender_id)
        out = [self._bsm[s] for s, k in zip(slots, keep) if k and s != own]
        return sorted(out, key=lambda b: b.sender_id)


def candidate_mask(p, v, a, pos, vel, acc, horizon, max_speed_sum, allowance):
    """Prefilter used by :meth:`NeighborTable.candidates` and the detector.

    Distance rule: a pair farther apart than the largest distance it can close
    within ``horizon`` (speeds bounded by ``max_speed_sum``; acceleration adds
    at most 0.5*|a|*h^2 each) plus ``allowance`` is dropped.  Receding rule:
    with dp.dv >= 0, |dv|^2 + dp.da >= 0 and dv.da >= 0 every coefficient of
    dD/dt is non-negative, so the separation never shrinks; such pairs are
    dropped once they are more than ``allowance`` apart.
    """
    p, v, a, pos, vel, acc = (np.asarray(x, dtype=float) for x in (p, v, a, pos, vel, acc))
    px, py = p[..., 0] - pos[..., 0], p[..., 1] - pos[..., 1]
    vx, vy = v[..., 0] - vel[..., 0], v[..., 1] - vel[..., 1]
    ax, ay = a[..., 0] - acc[..., 0], a[..., 1] - acc[..., 1]
    dist = np.hypot(px, py)
    accel_reach = 0.5 * (np.hypot(a[..., 0], a[..., 1]) + np.hypot(acc[..., 0], acc[..., 1])) * horizon**2
    reachable = dist <= max_speed_sum * horizon + accel_reach + allowance
    pv = px * vx + py * vy
    c1 = vx * vx + vy * vy + px * ax + py * ay
    c2 = vx * ax + vy * ay
    receding = (pv >= 0) & (c1 >= 0) & (c2 >= 0) & (dist > allowance)
    return reachable & ~receding
