"""Trajectory-based collision detection on received BSMs.

:class:`CollisionDetector` is the single edge-hosted detector fed by every
BSM; :class:`OnboardDetectors` is the distributed counterpart where each
equipped vehicle checks itself against what it overhears.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from mecavoid.kinematics import (closest_approach_linear_batch, closest_approach_linear_xy,
                                 closest_approach_quadratic_batch)
from mecavoid.messages import (AGE_TOL, TWO_PI, Alert, Bsm, EntityKind, NeighborTable, candidate_mask,
                               pair_key)

PED = int(EntityKind.PEDESTRIAN)
# cooldown comparisons happen on tick-derived times
COOLDOWN_TOL = 1e-9


@dataclass(frozen=True)
class DetectorConfig:
    t2c_vehicle: float = 10.0
    s2c_vehicle: float = 5.0
    t2c_pedestrian: float = 5.0
    s2c_pedestrian: float = 2.0
    max_bsm_age: float = 0.8
    accel_switch_threshold: float = 0.1
    alert_cooldown: float = 1.0
    max_speed_sum: float = 2 * 13.89
    ignore_pedestrian_pairs: bool = True

    def __post_init__(self):
        vals = (self.t2c_vehicle, self.s2c_vehicle, self.t2c_pedestrian, self.s2c_pedestrian,
                self.max_bsm_age, self.max_speed_sum)
        if min(vals) <= 0:
            raise ValueError("detector thresholds must be positive")
        if self.accel_switch_threshold < 0 or self.alert_cooldown < 0:
            raise ValueError("accel_switch_threshold and alert_cooldown must be >= 0")

    @property
    def horizon(self) -> float:
        return max(self.t2c_vehicle, self.t2c_pedestrian)

    @property
    def allowance(self) -> float:
        return max(self.s2c_vehicle, self.s2c_pedestrian)

    def thresholds(self, kind_a, kind_b):
        """(t2c, s2c) per pair: pedestrian values if either party is a pedestrian."""
        ped = (np.asarray(kind_a) == PED) | (np.asarray(kind_b) == PED)
        return (np.where(ped, self.t2c_pedestrian, self.t2c_vehicle),
                np.where(ped, self.s2c_pedestrian, self.s2c_vehicle))


def evaluate_pairs(cfg: DetectorConfig, pa, va, aa, ka, pb, vb, ab, kb):
    """Closest approach of row-aligned pairs at a common time plus the alert decision.

    Rows where both accelerations are below the switch threshold use the
    linear predictor; the rest use the acceleration-aware one.
    Returns ``(t_star, d_star, hit)``.
    """
    p = pa - pb
    dv = va - vb
    da = aa - ab
    thr = cfg.accel_switch_threshold
    low = (np.hypot(aa[:, 0], aa[:, 1]) < thr) & (np.hypot(ab[:, 0], ab[:, 1]) < thr)
    t, d = closest_approach_linear_batch(p, dv)
    if not low.all():
        q = ~low
        tq, dq = closest_approach_quadratic_batch(p[q], dv[q], da[q])
        t[q], d[q] = tq, dq
    t2c, s2c = cfg.thresholds(ka, kb)
    hit = (t >= 0.0) & (t <= t2c) & (d <= s2c)
    if cfg.ignore_pedestrian_pairs:
        hit &= ~((np.asarray(ka) == PED) & (np.asarray(kb) == PED))
    return t, d, hit


def _bsm_matrix(bsms) -> np.ndarray:
    """Numeric BSM fields as rows; raises :class:`MalformedBsm` for the first bad one."""
    raw = np.array([(b.generated_at, b.x, b.y, b.speed, b.heading, b.ax, b.ay, b.length, b.width)
                    for b in bsms], dtype=float).reshape(len(bsms), 9)
    with np.errstate(invalid="ignore"):
        bad = (~np.isfinite(raw).all(axis=1) | (raw[:, 0] < 0) | (raw[:, 3] < 0) | (raw[:, 4] < 0)
               | (raw[:, 4] >= TWO_PI) | (raw[:, 7] <= 0) | (raw[:, 8] <= 0))
    if bad.any():
        bsms[int(np.argmax(bad))].validate()
    return raw


def _bsm_arrays(raw, now):
    """Positions/velocities/accelerations of BSM rows extrapolated to ``now``."""
    g, x, y, sp, hd, ax, ay = raw[:, :7].T
    vx, vy = sp * np.cos(hd), sp * np.sin(hd)
    tau = now - g
    pos = np.column_stack([x + vx * tau + 0.5 * ax * tau * tau, y + vy * tau + 0.5 * ay * tau * tau])
    vel = np.column_stack([vx + ax * tau, vy + ay * tau])
    return pos, vel, np.column_stack([ax, ay])


class CollisionDetector:
    """Single detector instance owning one neighbor table."""

    def __init__(self, config: DetectorConfig | None = None, prefilter: bool = True):
        self.config = config or DetectorConfig()
        self.prefilter = prefilter
        self.table = NeighborTable()
        self._last_alert: dict = {}

    def process_bsm(self, bsm: Bsm, now: float) -> list[Alert]:
        return self.process_batch([bsm], now)

    def process_batch(self, bsms, now: float) -> list[Alert]:
        """Same result as calling :meth:`process_bsm` on each BSM in order at time ``now``."""
        if not bsms:
            return []
        raw = _bsm_matrix(bsms)
        cfg = self.config
        ok = now - raw[:, 0] <= cfg.max_bsm_age + AGE_TOL
        if not ok.any():
            return []
        fresh = [b for b, k in zip(bsms, ok) if k]
        raw = raw[ok]
        if len({b.sender_id for b in fresh}) < len(fresh):
            out = []
            for b in fresh:
                out.extend(self.process_batch([b], now))
            return out
        self.table.prune(now, cfg.max_bsm_age)
        B = len(fresh)
        bpos, bvel, bacc = _bsm_arrays(raw, now)
        bkind = np.array([int(b.kind) for b in fresh], dtype=np.int8)
        slots, tpos, tvel, tacc, tkind = self.table.snapshot(now)
        tsend = self.table.sender_ids(slots)
        bsend = np.array([b.sender_id for b in fresh], dtype=np.int64)
        # a stored record is compared with batch BSMs that precede its sender's own update
        by_id = np.argsort(bsend)
        pos_in = np.clip(np.searchsorted(bsend, tsend, sorter=by_id), 0, B - 1)
        match = bsend[by_id[pos_in]] == tsend
        first = np.where(match, by_id[pos_in], B)
        # columns: stored records, then the batch itself (row k sees batch BSMs j < k)
        cpos = np.concatenate([tpos, bpos])
        cvel = np.concatenate([tvel, bvel])
        cacc = np.concatenate([tacc, bacc])
        ckind = np.concatenate([tkind, bkind])
        other = np.concatenate([tsend, bsend])
        rows = np.arange(B)[:, None]
        pair_ok = np.concatenate([first[None, :] > rows, rows[:, 0][None, :] < rows], axis=1)
        t, d, hit = self._evaluate_grid(pair_ok, bpos, bvel, bacc, bkind, cpos, cvel, cacc, ckind)
        ks, col = np.nonzero(hit)
        alerts: list[Alert] = []
        if len(ks):
            oth, th, dh = other[col], t[ks, col], d[ks, col]
            for n in np.lexsort((oth, ks)):
                alerts.extend(self._emit(int(bsend[ks[n]]), int(oth[n]), float(th[n]), float(dh[n]), now))
        self.table.upsert_many(fresh, now)
        return alerts

    def _evaluate_grid(self, pair_ok, pos, vel, acc, kind, cpos, cvel, cacc, ckind):
        """:func:`evaluate_pairs` over every row x column pair allowed by ``pair_ok``.

        Pairs where both accelerations are below the switch threshold are
        solved in place on the grid; the rest are gathered, optionally
        screened with :func:`candidate_mask`, and solved with the
        acceleration-aware predictor.
        """
        cfg = self.config
        t, d = closest_approach_linear_xy(pos[:, None, 0] - cpos[None, :, 0], pos[:, None, 1] - cpos[None, :, 1],
                                          vel[:, None, 0] - cvel[None, :, 0], vel[:, None, 1] - cvel[None, :, 1])
        thr = cfg.accel_switch_threshold
        row_low = np.hypot(acc[:, 0], acc[:, 1]) < thr
        col_low = np.hypot(cacc[:, 0], cacc[:, 1]) < thr
        quad = pair_ok & ~(row_low[:, None] & col_low[None, :])
        k, c = np.nonzero(quad)
        if len(k):
            keep = np.ones(len(k), dtype=bool)
            if self.prefilter:
                keep = candidate_mask(pos[k], vel[k], acc[k], cpos[c], cvel[c], cacc[c], cfg.horizon,
                                      cfg.max_speed_sum, cfg.allowance)
                pair_ok = pair_ok.copy()
                pair_ok[k[~keep], c[~keep]] = False
                k, c = k[keep], c[keep]
            tq, dq = closest_approach_quadratic_batch(pos[k] - cpos[c], vel[k] - cvel[c], acc[k] - cacc[c])
            t[k, c], d[k, c] = tq, dq
        ped_row, ped_col = kind == PED, ckind == PED
        ped = ped_row[:, None] | ped_col[None, :]
        t2c = np.where(ped, cfg.t2c_pedestrian, cfg.t2c_vehicle)
        s2c = np.where(ped, cfg.s2c_pedestrian, cfg.s2c_vehicle)
        hit = pair_ok & (t >= 0.0) & (t <= t2c) & (d <= s2c)
        if cfg.ignore_pedestrian_pairs:
            hit &= ~(ped_row[:, None] & ped_col[None, :])
        return t, d, hit

    def _emit(self, tagged, other, t_star, d_star, now) -> list[Alert]:
        key = pair_key(tagged, other)
        last = self._last_alert.get(key)
        if last is not None and now - last < self.config.alert_cooldown - COOLDOWN_TOL:
            return []
        self._last_alert[key] = now
        if len(self._last_alert) > 4096:
            horizon = now - self.config.alert_cooldown
            self._last_alert = {k: v for k, v in self._last_alert.items() if v >= horizon}
        return [Alert(tagged, other, tagged, t_star, d_star, now),
                Alert(tagged, other, other, t_star, d_star, now)]


class OnboardDetectors:
    """Per-vehicle detection over overheard BSMs, stored as receiver x sender matrices.

    Row ``x`` holds the latest BSM vehicle ``x`` heard from each sender slot.
    Slots are the world's entity slots; callers clear a slot when it is reused.
    """

    FIELDS = ("x", "y", "vx", "vy", "ax", "ay", "gen")

    def __init__(self, config: DetectorConfig | None = None, capacity: int = 256):
        self.config = config or DetectorConfig()
        self._cap = 0
        self._m = {f: np.zeros((0, 0)) for f in self.FIELDS}
        self._valid = np.zeros((0, 0), dtype=bool)
        self._kind = np.zeros(0, dtype=np.int8)
        self._ids = np.full(0, -1, dtype=np.int64)
        self._last_alert: dict = {}
        self._grow(capacity)

    def _grow(self, cap: int) -> None:
        old = self._cap
        for f in self.FIELDS:
            new = np.zeros((cap, cap))
            new[:old, :old] = self._m[f]
            self._m[f] = new
        v = np.zeros((cap, cap), dtype=bool)
        v[:old, :old] = self._valid
        self._valid = v
        k = np.zeros(cap, dtype=np.int8)
        k[:old] = self._kind
        self._kind = k
        ids = np.full(cap, -1, dtype=np.int64)
        ids[:old] = self._ids
        self._ids = ids
        self._cap = cap

    def reset_slot(self, slot: int, entity_id: int = -1, kind: int = 0) -> None:
        while slot >= self._cap:
            self._grow(2 * self._cap)
        self._valid[slot, :] = False
        self._valid[:, slot] = False
        self._ids[slot] = entity_id
        self._kind[slot] = kind

    def receive(self, rx, tx, pos, vel, acc, gen) -> None:
        """Store BSM contents (rows aligned with ``tx``) as heard by ``rx``."""
        m = self._m
        m["x"][rx, tx], m["y"][rx, tx] = pos[:, 0], pos[:, 1]
        m["vx"][rx, tx], m["vy"][rx, tx] = vel[:, 0], vel[:, 1]
        m["ax"][rx, tx], m["ay"][rx, tx] = acc[:, 0], acc[:, 1]
        m["gen"][rx, tx] = gen
        self._valid[rx, tx] = True

    def heard_fresh(self, rx_slots, now: float):
        """(rx, tx) slot pairs whose stored BSM is still within the obsolescence age."""
        rows = np.asarray(rx_slots, dtype=np.int64)
        sub = self._valid[rows] & (now - self._m["gen"][rows] <= self.config.max_bsm_age + AGE_TOL)
        r, c = np.nonzero(sub)
        return rows[r], c

    def check(self, now: float, rx, tx, own_pos, own_vel, own_acc) -> list[Alert]:
        """Evaluate pairs (rx[i], tx[i]); ``own_*`` are the receivers' exact states at ``now``."""
        cfg = self.config
        if len(rx) == 0:
            return []
        m = self._m
        fresh = self._valid[rx, tx] & (now - m["gen"][rx, tx] <= cfg.max_bsm_age + AGE_TOL)
        rx, tx = rx[fresh], tx[fresh]
        own_pos, own_vel, own_acc = own_pos[fresh], own_vel[fresh], own_acc[fresh]
        if len(rx) == 0:
            return []
        tau = now - m["gen"][rx, tx]
        ax, ay = m["ax"][rx, tx], m["ay"][rx, tx]
        vx, vy = m["vx"][rx, tx], m["vy"][rx, tx]
        pb = np.column_stack([m["x"][rx, tx] + vx * tau + 0.5 * ax * tau * tau,
                              m["y"][rx, tx] + vy * tau + 0.5 * ay * tau * tau])
        vb = np.column_stack([vx + ax * tau, vy + ay * tau])
        ab = np.column_stack([ax, ay])
        t, d, hit = evaluate_pairs(cfg, own_pos, own_vel, own_acc, self._kind[rx],
                                   pb, vb, ab, self._kind[tx])
        out = []
        for i in np.flatnonzero(hit):
            x, y = int(self._ids[rx[i]]), int(self._ids[tx[i]])
            key = (x, y)
            last = self._last_alert.get(key)
            if last is not None and now - last < cfg.alert_cooldown - COOLDOWN_TOL:
                continue
            self._last_alert[key] = now
            out.append(Alert(x, y, x, float(t[i]), float(d[i]), now))
        out.sort(key=lambda a: (a.tagged_id, a.other_id))
        return out


ALERT_CSV_HEADER = ["issued_at", "tagged_id", "other_id", "t_star", "d_star"]


def write_alert_csv(alerts, fh) -> None:
    """One row per alerted pair and issue time (recipient copies collapsed)."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(ALERT_CSV_HEADER)
    seen = set()
    for a in alerts:
        key = (a.issued_at, a.tagged_id, a.other_id)
        if key in seen:
            continue
        seen.add(key)
        w.writerow([f"{a.issued_at:.6f}", a.tagged_id, a.other_id,
                    f"{a.predicted_t_star:.6f}", f"{a.predicted_d_star:.6f}"])


def expected_alert(t_star: float, d_star: float, kind_a: EntityKind, kind_b: EntityKind,
                   cfg: DetectorConfig) -> bool:
    """Scalar statement of the alert rule, used by tests and oracles."""
    if cfg.ignore_pedestrian_pairs and kind_a == kind_b == EntityKind.PEDESTRIAN:
        return False
    ped = EntityKind.PEDESTRIAN in (kind_a, kind_b)
    t2c = cfg.t2c_pedestrian if ped else cfg.t2c_vehicle
    s2c = cfg.s2c_pedestrian if ped else cfg.s2c_vehicle
    return 0.0 <= t_star <= t2c and d_star <= s2c and math.isfinite(d_star)
