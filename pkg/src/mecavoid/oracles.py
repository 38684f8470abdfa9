"""Brute-force reference checks for the numeric core.

Every check here recomputes its answer by a route that shares no code with
the library function under test: dense time grids instead of root solving,
polynomial expansion instead of the closed-form cubic, the analytic Gamma
tail instead of sampled fading.  ``run_suite`` returns one line per check.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy import stats

GRID_STEP = 1e-3
GRID_SPAN = 30.0
# a second grid minimum within this much of the best one makes t_star ambiguous
TIE_DIST = 1e-4
T_TOL = 1e-3
D_TOL = 1e-4
CUBIC_TOL = 1e-7


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}  {self.detail}".rstrip()


def _dist(p0, dv, da, t):
    """|p0 + dv t + da t^2 / 2| for row-aligned cases (n, 2) and times (n, k)."""
    x = p0[:, None, 0] + dv[:, None, 0] * t + 0.5 * da[:, None, 0] * t * t
    y = p0[:, None, 1] + dv[:, None, 1] * t + 0.5 * da[:, None, 1] * t * t
    return np.sqrt(x * x + y * y)


def grid_closest_approach(p0, dv, da=None, span: float = GRID_SPAN, step: float = GRID_STEP,
                          chunk: int = 64):
    """Grid minimiser of the separation over ``[0, span]`` with a local refinement.

    Returns ``(t, d, ambiguous)``.  ``ambiguous`` flags cases where another
    grid-local minimum (away from the best one) is within ``TIE_DIST`` of it.
    Past the window the scan continues up to a bound beyond which the
    separation provably exceeds its starting value.
    """
    p0 = np.atleast_2d(np.asarray(p0, dtype=float))
    dv = np.atleast_2d(np.asarray(dv, dtype=float))
    da = np.zeros_like(p0) if da is None else np.atleast_2d(np.asarray(da, dtype=float))
    n = len(p0)
    t_out = np.empty(n)
    d_out = np.empty(n)
    amb = np.zeros(n, dtype=bool)
    grid = np.arange(0.0, span + step / 2, step)
    for s in range(0, n, chunk):
        sl = slice(s, min(n, s + chunk))
        d = _dist(p0[sl], dv[sl], da[sl], grid[None, :])
        k = np.argmin(d, axis=1)
        rows = np.arange(d.shape[0])
        best = d[rows, k]
        interior = (d[:, 1:-1] <= d[:, :-2]) & (d[:, 1:-1] <= d[:, 2:])
        for r in range(d.shape[0]):
            idx = np.flatnonzero(interior[r]) + 1
            if d[r, 0] <= d[r, 1]:
                idx = np.append(idx, 0)
            far = idx[np.abs(idx - k[r]) > 2]
            amb[s + r] = bool(np.any(d[r, far] <= best[r] + TIE_DIST))
        t_out[sl] = grid[k]
        d_out[sl] = best
    # beyond the window: |d(t)| >= |da| t^2/2 - |dv| t - |p0|, which exceeds
    # |d(0)| past t_bound, so scanning [span, t_bound] covers the global minimum
    pn = np.hypot(p0[:, 0], p0[:, 1])
    vn = np.hypot(dv[:, 0], dv[:, 1])
    an = np.hypot(da[:, 0], da[:, 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        t_bound = np.where(an > 0, (vn + np.sqrt(vn * vn + 4.0 * an * pn)) / an, np.inf)
    for i in np.flatnonzero(t_bound > span):
        hi = min(t_bound[i], 1e4)
        lo = span
        while lo < hi:
            g = np.arange(lo, min(hi, lo + span) + step, step)
            d = _dist(p0[i:i + 1], dv[i:i + 1], da[i:i + 1], g[None, :])[0]
            k = int(np.argmin(d))
            if d[k] < d_out[i] - TIE_DIST:
                t_out[i], d_out[i], amb[i] = g[k], d[k], False
            elif d[k] <= d_out[i] + TIE_DIST and abs(g[k] - t_out[i]) > 2 * step:
                amb[i] = True
            lo = g[-1]
    # local refinement on a fine grid around the coarse minimiser
    fine = np.linspace(-1.0, 1.0, 2001) * step
    for _ in range(2):
        t = np.maximum(t_out[:, None] + fine[None, :], 0.0)
        d = _dist(p0, dv, da, t)
        k = np.argmin(d, axis=1)
        rows = np.arange(n)
        t_out, d_out = t[rows, k], d[rows, k]
        fine = fine / 1000.0
    return t_out, d_out, amb


def random_relative_motions(n: int, rng: np.random.Generator):
    p0 = rng.uniform(-50.0, 50.0, (n, 2))
    dv = rng.uniform(-20.0, 20.0, (n, 2))
    da = rng.uniform(-5.0, 5.0, (n, 2))
    return p0, dv, da


def check_closest_approach(n: int = 10_000, seed: int = 7) -> CheckResult:
    from mecavoid.kinematics import closest_approach_quadratic_batch

    p0, dv, da = random_relative_motions(n, np.random.default_rng(seed))
    t_imp, d_imp = closest_approach_quadratic_batch(p0, dv, da)
    t_ref, d_ref, amb = grid_closest_approach(p0, dv, da)
    d_err = np.abs(d_imp - d_ref)
    t_err = np.where(amb, 0.0, np.abs(t_imp - t_ref))
    ok = bool((d_err <= D_TOL).all() and (t_err <= T_TOL).all())
    return CheckResult("closest-approach grid oracle", ok,
                       f"n={n} max|dt|={t_err.max():.2e} s max|dd|={d_err.max():.2e} m "
                       f"ambiguous={int(amb.sum())}")


def check_linear_reduction(n: int = 10_000, seed: int = 8) -> CheckResult:
    from mecavoid.kinematics import closest_approach_linear_batch, closest_approach_quadratic_batch

    p0, dv, _ = random_relative_motions(n, np.random.default_rng(seed))
    tl, dl = closest_approach_linear_batch(p0, dv)
    tq, dq = closest_approach_quadratic_batch(p0, dv, np.zeros_like(p0))
    err = max(np.abs(tl - tq).max(), np.abs(dl - dq).max())
    return CheckResult("quadratic with zero acceleration equals linear", bool(err <= 1e-9), f"max err={err:.1e}")


def _expand(r1, r2, r3, lead):
    """Coefficients of lead (t - r1)(t - r2)(t - r3)."""
    return (lead, -lead * (r1 + r2 + r3), lead * (r1 * r2 + r1 * r3 + r2 * r3), -lead * r1 * r2 * r3)


def _residual(c, r):
    c3, c2, c1, c0 = c
    m = max(1.0, abs(r))
    scale = max(1.0, abs(c3) * m ** 3, abs(c2) * m ** 2, abs(c1) * m, abs(c0))
    return abs(((c3 * r + c2) * r + c1) * r + c0) / scale


def check_cubic(n: int = 10_000, seed: int = 9) -> CheckResult:
    from mecavoid.kinematics import solve_cubic

    rng = np.random.default_rng(seed)
    worst = 0.0
    missing = 0
    for _ in range(n):
        roots = np.sort(rng.uniform(-20.0, 20.0, 3))
        c = _expand(*roots, lead=float(rng.uniform(0.1, 5.0)) * rng.choice([-1.0, 1.0]))
        got = solve_cubic(*c)
        worst = max([worst] + [_residual(c, r) for r in got])
        # well separated roots must all be found
        if np.min(np.diff(roots)) > 1e-2:
            for r in roots:
                if not got or min(abs(g - r) for g in got) > 1e-6 * max(1.0, abs(r)):
                    missing += 1
    exact = solve_cubic(1.0, -6.0, 11.0, -6.0)
    ex_ok = len(exact) == 3 and all(abs(a - b) <= CUBIC_TOL for a, b in zip(exact, (1.0, 2.0, 3.0)))
    ok = worst <= CUBIC_TOL and missing == 0 and ex_ok
    return CheckResult("cubic roots against expanded polynomials", ok,
                       f"n={n} worst residual={worst:.1e} missing={missing} (1,-6,11,-6)->{[round(r, 9) for r in exact]}")


def delivery_probability(link, d, los: bool) -> float:
    """Exact delivery probability: the unit-mean Gamma power gain must cover the link deficit."""
    mean_dbm = link.tx_power_dbm - link.ref_loss_db - 10.0 * link.pathloss_exponent * math.log10(d)
    if not los:
        mean_dbm -= link.nlos_extra_loss_db
    m = link.nakagami_m_los if los else link.nakagami_m_nlos
    need = 10.0 ** ((link.rx_threshold_dbm - mean_dbm) / 10.0)
    return float(stats.gamma.sf(need, a=m, scale=1.0 / m))


def los_half_distance(link) -> float:
    """Distance where the LOS delivery probability is one half (bisection on the exact form)."""
    lo, hi = 1.0, 1e5
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        if delivery_probability(link, mid, True) > 0.5:
            lo = mid
        else:
            hi = mid
    return math.sqrt(lo * hi)


def _mc(link, d, los, draws, rng):
    return float(link.delivered(np.full(draws, d), los, rng).mean())


def check_fading(seed: int = 10) -> CheckResult:
    from dataclasses import replace

    from mecavoid.network import LinkModel

    rng = np.random.default_rng(seed)
    link = LinkModel()
    notes, ok = [], True
    p10 = _mc(link, 10.0, True, 100_000, rng)
    ok &= p10 > 0.99
    notes.append(f"P(10 m LOS)={p10:.4f}")
    d50 = los_half_distance(link)
    harsh = replace(link, nlos_extra_loss_db=20.0)
    pn = _mc(harsh, d50, False, 100_000, rng)
    ok &= pn < 0.05
    notes.append(f"P(NLOS+20dB @ {d50:.1f} m)={pn:.4f}")
    # Monte-Carlo against the analytic tail, and monotone in distance
    worst_z, prev, mono = 0.0, 1.0, True
    for d in np.geomspace(5.0, 1000.0, 25):
        for los in (True, False):
            exact = delivery_probability(link, float(d), los)
            est = _mc(link, float(d), los, 10_000, rng)
            sd = math.sqrt(max(exact * (1 - exact), 1e-12) / 10_000)
            worst_z = max(worst_z, abs(est - exact) / max(sd, 1e-4))
        exact_los = delivery_probability(link, float(d), True)
        mono &= exact_los <= prev + 1e-12
        prev = exact_los
    ok &= worst_z <= 5.0 and mono
    notes.append(f"max z={worst_z:.2f} monotone={mono}")
    return CheckResult("Nakagami delivery Monte-Carlo", bool(ok), " ".join(notes))


def check_examples() -> CheckResult:
    """The hand-derived example values, each against its own reference computation."""
    from mecavoid.detector import CollisionDetector
    from mecavoid.kinematics import (RelativeMotion, Vec2, closest_approach_linear,
                                     closest_approach_quadratic, distance_at)
    from mecavoid.messages import Bsm, EntityKind, NeighborTable
    from mecavoid.metrics import traffic_load
    from mecavoid.mobility import overlap
    from mecavoid.reaction import stopping_distance

    fails = []

    def expect(name, cond):
        if not cond:
            fails.append(name)

    # linear crossing case against a fine grid over [0, 20] s
    t_ref, d_ref, _ = grid_closest_approach([[-50.0, 40.0]], [[10.0, -10.0]], span=20.0, step=1e-4)
    ca = closest_approach_linear(RelativeMotion(Vec2(-50, 40), Vec2(10, -10)))
    expect("linear crossing", abs(ca.t_star - t_ref[0]) < 1e-3 and abs(ca.d_star - d_ref[0]) < 1e-4
           and abs(ca.t_star - 4.5) < 1e-9 and abs(ca.d_star - math.sqrt(50)) < 1e-9)
    # 1-D gap 12 - 4t + t^2
    rel = RelativeMotion(Vec2(12, 0), Vec2(-4, 0), Vec2(2, 0))
    t_ref, d_ref, _ = grid_closest_approach([[12.0, 0.0]], [[-4.0, 0.0]], [[2.0, 0.0]], span=20.0, step=1e-4)
    cq = closest_approach_quadratic(rel)
    expect("1-D accelerating gap", abs(cq.t_star - 2.0) < 1e-9 and abs(cq.d_star - 8.0) < 1e-9
           and abs(t_ref[0] - 2.0) < 1e-3 and abs(d_ref[0] - 8.0) < 1e-4)
    expect("distance_at 1-D", abs(distance_at(rel, 2.0) - (12 - 8 + 4)) < 1e-12)
    # neighbour 500 m ahead is outside the 10 s reach at 27.78 m/s combined speed
    table = NeighborTable()
    far = Bsm(0.0, 2, EntityKind.VEHICLE, 500.0, 0.0, 0.0, 0.0)
    table.upsert(far, 0.0)
    tagged = Bsm(0.0, 1, EntityKind.VEHICLE, 0.0, 0.0, 13.89, 0.0)
    expect("prefilter excludes 500 m", table.candidates(tagged, 10.0, 27.78) == [] and 500 > 277.8 + 5)
    # head-on vehicles 100 m apart
    det = CollisionDetector()
    det.process_bsm(Bsm(0.0, 2, EntityKind.VEHICLE, 100.0, 0.0, 13.89, math.pi), 0.0)
    alerts = det.process_bsm(Bsm(0.0, 1, EntityKind.VEHICLE, 0.0, 0.0, 13.89, 0.0), 0.0)
    t_ref, d_ref, _ = grid_closest_approach([[-100.0, 0.0]], [[27.78, 0.0]], span=20.0, step=1e-4)
    expect("head-on alert", len(alerts) == 2 and abs(alerts[0].predicted_t_star - t_ref[0]) < 1e-3
           and d_ref[0] < 1e-2 and t_ref[0] <= 10.0)
    # vehicle-pedestrian pair passing 3 m apart: pedestrian thresholds apply
    det = CollisionDetector()
    det.process_bsm(Bsm(0.0, 2, EntityKind.PEDESTRIAN, 30.0, 3.0, 0.0, 0.0), 0.0)
    alerts = det.process_bsm(Bsm(0.0, 1, EntityKind.VEHICLE, 0.0, 0.0, 13.89, 0.0), 0.0)
    expect("pedestrian threshold", alerts == [])
    # disc contact thresholds
    h = np.array([1.0, 0.0])
    expect("disc 3.9 m", bool(overlap(np.zeros(2), h, 4.0, 1.8, np.array([3.9, 0.0]), h, 4.0, 1.8, "disc")))
    expect("disc 2.4 m", not bool(overlap(np.zeros(2), h, 4.0, 1.8, np.array([2.4, 0.0]), h, 0.6, 0.6, "disc")))
    # stopping distances against a numerically integrated speed profile
    for v, a, want in ((13.89, 4.5, 21.44), (2.0, 2.0, 1.0)):
        ts = np.linspace(0.0, v / a, 200_001)
        integ = float(np.trapezoid(v - a * ts, ts))
        expect(f"stopping {v}/{a}", abs(stopping_distance(v, a) - integ) < 1e-6 and abs(integ - want) < 5e-3)
    # fixed 10 Hz from 60 vehicles
    ticks = np.arange(0.0, 100.0, 0.1)
    _, load = traffic_load(ticks, 1.0, 100.0, weights=np.full(len(ticks), 60))
    expect("600 msgs/s", abs(float(np.median(load[5:])) - 600.0) < 1e-9)
    return CheckResult("derived example values", not fails, "failed: " + ", ".join(fails) if fails else "all match")


SUITES = {
    "closest": [check_closest_approach, check_linear_reduction],
    "cubic": [check_cubic],
    "fading": [check_fading],
    "examples": [check_examples],
}


def run_suite(name: str = "all") -> list[CheckResult]:
    names = list(SUITES) if name == "all" else [name]
    out = []
    for n in names:
        for fn in SUITES[n]:
            t0 = time.perf_counter()
            r = fn()
            r.detail += f" ({time.perf_counter() - t0:.1f} s)"
            out.append(r)
    return out
