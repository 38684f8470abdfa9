"""Planar relative motion, closest approach and a closed-form cubic solver.

Scalar functions are the library surface; the ``*_batch`` variants operate on
``(N, 2)`` arrays and are what the detector uses on its hot path.  Both share
the same formulas, so the scalar results are the batch results for N=1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# |dv|^2 below this (m/s)^2 is treated as constant separation
EPS_V = 1e-9
# leading coefficient (after normalising by the largest |c_i|) treated as zero
EPS_LEAD = 1e-12
NEWTON_STEPS = 4


@dataclass(frozen=True, slots=True)
class Vec2:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite vector component: ({self.x}, {self.y})")

    def __add__(self, other: Vec2) -> Vec2:
        return Vec2(self.x + other.x, self.y + other.y)

    def __sub__(self, other: Vec2) -> Vec2:
        return Vec2(self.x - other.x, self.y - other.y)

    def __mul__(self, k: float) -> Vec2:
        return Vec2(self.x * k, self.y * k)

    __rmul__ = __mul__

    def __neg__(self) -> Vec2:
        return Vec2(-self.x, -self.y)

    def dot(self, other: Vec2) -> float:
        return self.x * other.x + self.y * other.y

    def norm(self) -> float:
        return math.hypot(self.x, self.y)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y])


ZERO = Vec2(0.0, 0.0)


@dataclass(frozen=True, slots=True)
class KinematicState:
    position: Vec2
    velocity: Vec2
    acceleration: Vec2 = ZERO
    timestamp: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.timestamp) or self.timestamp < 0:
            raise ValueError(f"timestamp must be finite and >= 0, got {self.timestamp}")

    def advanced(self, t: float) -> KinematicState:
        """State extrapolated with constant acceleration to absolute time ``t``."""
        tau = t - self.timestamp
        pos = self.position + self.velocity * tau + self.acceleration * (0.5 * tau * tau)
        vel = self.velocity + self.acceleration * tau
        return KinematicState(pos, vel, self.acceleration, t)


@dataclass(frozen=True, slots=True)
class RelativeMotion:
    """d(t) = p0 + dv*t + 0.5*da*t^2."""

    p0: Vec2
    dv: Vec2
    da: Vec2 = ZERO

    def at(self, t: float) -> Vec2:
        return self.p0 + self.dv * t + self.da * (0.5 * t * t)


@dataclass(frozen=True, slots=True)
class ClosestApproach:
    t_star: float
    d_star: float


def relative_motion(a: KinematicState, b: KinematicState) -> RelativeMotion:
    """Componentwise difference ``a - b`` of two states taken at a common time."""
    return RelativeMotion(a.position - b.position, a.velocity - b.velocity,
                          a.acceleration - b.acceleration)


def distance_at(rel: RelativeMotion, t: float) -> float:
    if not math.isfinite(t):
        raise ValueError("t must be finite")
    return rel.at(t).norm()


def _rel_arrays(rel: RelativeMotion):
    return (np.array([[rel.p0.x, rel.p0.y]]), np.array([[rel.dv.x, rel.dv.y]]),
            np.array([[rel.da.x, rel.da.y]]))


def closest_approach_linear(rel: RelativeMotion) -> ClosestApproach:
    """Closest approach ignoring ``rel.da``.

    Receding pairs keep their negative ``t_star`` with ``d_star = |p0|``; the
    caller decides what to do with them.
    """
    p0, dv, _ = _rel_arrays(rel)
    t, d = closest_approach_linear_batch(p0, dv)
    return ClosestApproach(float(t[0]), float(d[0]))


def closest_approach_quadratic(rel: RelativeMotion) -> ClosestApproach:
    """Global minimiser of |d(t)| over t >= 0 under constant relative acceleration."""
    p0, dv, da = _rel_arrays(rel)
    t, d = closest_approach_quadratic_batch(p0, dv, da)
    return ClosestApproach(float(t[0]), float(d[0]))


def closest_approach_linear_xy(px, py, vx, vy):
    """Component-wise linear closest approach; inputs broadcast against each other."""
    px, py, vx, vy = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (px, py, vx, vy)))
    vv = vx * vx
    vv += vy * vy
    t = px * vx
    t += py * vy
    still = vv < EPS_V
    vv[still] = 1.0
    t /= vv
    np.negative(t, out=t)
    t[still] = 0.0
    tc = np.maximum(t, 0.0)
    x = vx * tc
    x += px
    x *= x
    tc *= vy
    tc += py
    tc *= tc
    x += tc
    return t, np.sqrt(x, out=x)


def closest_approach_linear_batch(p0: np.ndarray, dv: np.ndarray):
    p0 = np.asarray(p0, dtype=float)
    dv = np.asarray(dv, dtype=float)
    return closest_approach_linear_xy(p0[:, 0], p0[:, 1], dv[:, 0], dv[:, 1])


def closest_approach_quadratic_batch(p0: np.ndarray, dv: np.ndarray, da: np.ndarray):
    p0 = np.asarray(p0, dtype=float)
    dv = np.asarray(dv, dtype=float)
    da = np.asarray(da, dtype=float)
    t, d = closest_approach_linear_batch(p0, dv)
    aa = np.einsum("ij,ij->i", da, da)
    acc = aa > 0.0
    if not acc.any():
        return t, d
    p, v, a = p0[acc], dv[acc], da[acc]
    # D(t) = |p + v t + a t^2/2|^2, D'(t)/2 = c3 t^3 + c2 t^2 + c1 t + c0
    c3 = 0.5 * aa[acc]
    c2 = 1.5 * np.einsum("ij,ij->i", v, a)
    c1 = np.einsum("ij,ij->i", v, v) + np.einsum("ij,ij->i", p, a)
    c0 = np.einsum("ij,ij->i", p, v)
    roots = solve_cubic_batch(c3, c2, c1, c0)
    cand = np.concatenate([np.zeros((len(p), 1)), roots], axis=1)
    cand = np.where(np.isfinite(cand) & (cand >= 0.0), cand, np.nan)
    x = p[:, None, 0] + v[:, None, 0] * cand + 0.5 * a[:, None, 0] * cand**2
    y = p[:, None, 1] + v[:, None, 1] * cand + 0.5 * a[:, None, 1] * cand**2
    dist2 = np.where(np.isnan(cand), np.inf, x * x + y * y)
    k = np.argmin(dist2, axis=1)
    rows = np.arange(len(p))
    t[acc] = cand[rows, k]
    d[acc] = np.sqrt(dist2[rows, k])
    return t, d


def _poly(c3, c2, c1, c0, r):
    return ((c3 * r + c2) * r + c1) * r + c0


def _dpoly(c3, c2, c1, r):
    return (3.0 * c3 * r + 2.0 * c2) * r + c1


def solve_cubic_batch(c3, c2, c1, c0) -> np.ndarray:
    """Real roots of ``c3 t^3 + c2 t^2 + c1 t + c0`` row by row.

    Returns an ``(N, 3)`` array padded with NaN.  Rows whose leading
    coefficients vanish fall back to the quadratic or linear solution; an
    identically zero row yields no roots.
    """
    c3, c2, c1, c0 = (np.atleast_1d(np.asarray(c, dtype=float)) for c in (c3, c2, c1, c0))
    c3, c2, c1, c0 = np.broadcast_arrays(c3, c2, c1, c0)
    n = c3.shape[0]
    roots = np.full((n, 3), np.nan)
    scale = np.maximum.reduce([np.abs(c3), np.abs(c2), np.abs(c1), np.abs(c0)])
    nz = scale > 0.0
    s = np.where(nz, scale, 1.0)
    a3, a2, a1, a0 = c3 / s, c2 / s, c1 / s, c0 / s

    cubic = nz & (np.abs(a3) > EPS_LEAD)
    quad = nz & ~cubic & (np.abs(a2) > EPS_LEAD)
    lin = nz & ~cubic & ~quad & (np.abs(a1) > EPS_LEAD)

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if cubic.any():
            A3 = a3[cubic]
            b = a2[cubic] / A3
            c = a1[cubic] / A3
            d = a0[cubic] / A3
            p = c - b * b / 3.0
            q = 2.0 * b**3 / 27.0 - b * c / 3.0 + d
            disc = (0.5 * q) ** 2 + (p / 3.0) ** 3
            shift = -b / 3.0
            out = np.full((len(b), 3), np.nan)

            one = disc > 0.0
            sgn = np.where(q >= 0.0, 1.0, -1.0)
            u = -sgn * np.cbrt(0.5 * np.abs(q) + np.sqrt(np.where(one, disc, 0.0)))
            w = np.where(u != 0.0, -p / (3.0 * u), 0.0)
            out[:, 0] = np.where(one, u + w + shift, np.nan)

            three = ~one
            # disc <= 0 with p >= 0 only happens when (p/3)^3 underflows: a triple root
            flat = three & (p >= 0.0)
            pneg = np.where(three & ~flat, p, -1.0)
            r = 2.0 * np.sqrt(-pneg / 3.0)
            arg = np.clip(1.5 * q / pneg * np.sqrt(-3.0 / pneg), -1.0, 1.0)
            phi = np.arccos(arg) / 3.0
            for k in range(3):
                rk = r * np.cos(phi - 2.0 * math.pi * k / 3.0) + shift
                out[:, k] = np.where(three & ~flat, rk, out[:, k])
            out[:, 0] = np.where(flat, shift, out[:, 0])
            roots[cubic] = out

        if quad.any():
            A, B, C = a2[quad], a1[quad], a0[quad]
            disc = B * B - 4.0 * A * C
            tiny = 1e-14 * (B * B + np.abs(4.0 * A * C))
            disc = np.where((disc < 0.0) & (disc > -tiny), 0.0, disc)
            real = disc >= 0.0
            sq = np.sqrt(np.where(real, disc, 0.0))
            qq = -0.5 * (B + np.where(B >= 0.0, sq, -sq))
            r1 = qq / A
            r2 = np.where(qq != 0.0, C / qq, r1)
            out = np.full((len(A), 3), np.nan)
            out[:, 0] = np.where(real, r1, np.nan)
            out[:, 1] = np.where(real & (sq > 0.0), r2, np.nan)
            roots[quad] = out

        if lin.any():
            roots[lin, 0] = -a0[lin] / a1[lin]

        # Newton polish against the normalised polynomial; keep a step only if it helps
        A3, A2, A1, A0 = (x[:, None] for x in (a3, a2, a1, a0))
        for _ in range(NEWTON_STEPS):
            f = _poly(A3, A2, A1, A0, roots)
            df = _dpoly(A3, A2, A1, roots)
            step = np.where((df != 0.0) & np.isfinite(df), f / df, 0.0)
            cand = roots - step
            better = np.abs(_poly(A3, A2, A1, A0, cand)) < np.abs(f)
            roots = np.where(better & np.isfinite(cand), cand, roots)
    return roots


def solve_cubic(c3: float, c2: float, c1: float, c0: float) -> list[float]:
    """Distinct real roots of ``c3 t^3 + c2 t^2 + c1 t + c0``, ascending."""
    coeffs = (c3, c2, c1, c0)
    if not all(math.isfinite(c) for c in coeffs):
        raise ValueError("coefficients must be finite")
    if all(c == 0.0 for c in coeffs):
        raise ValueError("identically zero polynomial")
    row = solve_cubic_batch(*coeffs)[0]
    found = sorted(float(r) for r in row if np.isfinite(r))
    out: list[float] = []
    for r in found:
        if out and abs(r - out[-1]) <= 1e-9 * max(1.0, abs(r)):
            continue
        out.append(r)
    return out


def cubic_residual_scale(coeffs, r: float) -> float:
    """Magnitude scale used to judge a root's residual: max |c_i| |r|^i, at least 1."""
    c3, c2, c1, c0 = coeffs
    m = max(1.0, abs(r))
    return max(1.0, abs(c3) * m**3, abs(c2) * m**2, abs(c1) * m, abs(c0))
