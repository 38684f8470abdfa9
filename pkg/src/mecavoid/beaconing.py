"""BSM generation policies: ETSI-style dynamic triggering and fixed-rate beaconing."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# tick times are k*dt, so elapsed intervals carry float noise of a few ulps
TIME_TOL = 1e-9


@dataclass(frozen=True)
class BeaconPolicy:
    """``rate_hz=None`` selects dynamic triggering; otherwise a fixed rate."""

    rate_hz: float | None = None
    min_interval: float = 0.1
    max_interval: float = 1.0
    pos_delta: float = 4.0
    speed_delta: float = 0.5
    heading_delta: float = math.radians(4.0)

    def __post_init__(self):
        if self.rate_hz is not None and not self.rate_hz > 0:
            raise ValueError("fixed beacon rate must be positive")
        if not 0 < self.min_interval <= self.max_interval:
            raise ValueError("need 0 < min_interval <= max_interval")
        if min(self.pos_delta, self.speed_delta, self.heading_delta) <= 0:
            raise ValueError("trigger deltas must be positive")

    @property
    def dynamic(self) -> bool:
        return self.rate_hz is None

    @classmethod
    def fixed(cls, rate_hz: float) -> BeaconPolicy:
        return cls(rate_hz=rate_hz)

    @classmethod
    def parse(cls, text: str, **triggers) -> BeaconPolicy:
        """``"dynamic"``, ``"fixed10"`` or ``"fixed:10"``."""
        t = text.strip().lower()
        if t == "dynamic":
            return cls(**triggers)
        if t.startswith("fixed"):
            rate = t[5:].lstrip(":") or "10"
            return cls(rate_hz=float(rate), **triggers)
        raise ValueError(f"unknown beaconing mode {text!r}")

    def label(self) -> str:
        return "dynamic" if self.dynamic else f"fixed:{self.rate_hz:g}"


def pedestrian_schedule() -> BeaconPolicy:
    return BeaconPolicy.fixed(1.0)


def heading_change(a: float, b: float) -> float:
    """Smallest absolute angle between two headings."""
    d = (a - b) % (2.0 * math.pi)
    return min(d, 2.0 * math.pi - d)


def should_emit(policy: BeaconPolicy, current, last_sent, elapsed: float) -> bool:
    """``current``/``last_sent`` are ``(position: Vec2, speed, heading)``; ``last_sent`` may be None."""
    if elapsed < 0:
        raise ValueError("elapsed must be >= 0")
    if last_sent is None:
        return True
    if not policy.dynamic:
        return elapsed + TIME_TOL >= 1.0 / policy.rate_hz
    if elapsed + TIME_TOL < policy.min_interval:
        return False
    if elapsed + TIME_TOL >= policy.max_interval:
        return True
    pos, speed, heading = current
    pos0, speed0, heading0 = last_sent
    return ((pos - pos0).norm() >= policy.pos_delta
            or abs(speed - speed0) >= policy.speed_delta
            or heading_change(heading, heading0) >= policy.heading_delta)


def emit_mask(policy: BeaconPolicy, elapsed, pos, pos0, speed, speed0, heading, heading0):
    """Vectorised :func:`should_emit` over arrays; ``elapsed=inf`` means never sent."""
    elapsed = np.asarray(elapsed, dtype=float)
    if not policy.dynamic:
        return elapsed + TIME_TOL >= 1.0 / policy.rate_hz
    moved = np.hypot(pos[:, 0] - pos0[:, 0], pos[:, 1] - pos0[:, 1]) >= policy.pos_delta
    d = np.mod(heading - heading0, 2.0 * math.pi)
    turned = np.minimum(d, 2.0 * math.pi - d) >= policy.heading_delta
    changed = moved | (np.abs(speed - speed0) >= policy.speed_delta) | turned
    return (elapsed + TIME_TOL >= policy.min_interval) & (
        (elapsed + TIME_TOL >= policy.max_interval) | changed)
