"""Message delivery: lossless edge path and one-hop V2V with path loss and fading."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mecavoid.kinematics import Vec2


@dataclass(frozen=True)
class Building:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate building rectangle {self}")


def parse_buildings(text: str) -> list[Building]:
    out = []
    for row in csv.reader(io.StringIO(text)):
        if not row or row[0].strip().startswith("#"):
            continue
        if row[0].strip() == "x_min":
            continue
        out.append(Building(*(float(v) for v in row)))
    return out


def load_buildings(path) -> list[Building]:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"buildings file not found: {p}")
    return parse_buildings(p.read_text())


def buildings_array(buildings) -> np.ndarray:
    return np.array([[b.x_min, b.y_min, b.x_max, b.y_max] for b in buildings],
                    dtype=float).reshape(-1, 4)


def los_mask(a: np.ndarray, b: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Slab test of segments ``a[i]-b[i]`` against every rectangle; True means clear."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    n = len(a)
    if len(boxes) == 0 or n == 0:
        return np.ones(n, dtype=bool)
    d = (b - a)[:, None, :]
    o = a[:, None, :]
    lo = boxes[None, :, :2]
    hi = boxes[None, :, 2:]
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o) / d
        t2 = (hi - o) / d
    # an axis-parallel segment either lies inside the slab (any t) or misses it
    inside = (o >= lo) & (o <= hi)
    par = d == 0.0
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    enter = np.maximum(np.maximum(tmin[..., 0], tmin[..., 1]), 0.0)
    leave = np.minimum(np.minimum(tmax[..., 0], tmax[..., 1]), 1.0)
    return ~np.any(enter <= leave, axis=1)


def los_check(a: Vec2, b: Vec2, buildings) -> bool:
    boxes = buildings if isinstance(buildings, np.ndarray) else buildings_array(buildings)
    return bool(los_mask(np.array([[a.x, a.y]]), np.array([[b.x, b.y]]), boxes)[0])


@dataclass(frozen=True)
class LinkModel:
    tx_power_dbm: float = 20.0
    ref_loss_db: float = 47.0
    pathloss_exponent: float = 2.75
    nlos_extra_loss_db: float = 15.0
    nakagami_m_los: float = 3.0
    nakagami_m_nlos: float = 1.5
    rx_threshold_dbm: float = -92.0

    def __post_init__(self):
        if min(self.nakagami_m_los, self.nakagami_m_nlos) < 0.5:
            raise ValueError("nakagami m must be >= 0.5")
        if self.pathloss_exponent <= 0:
            raise ValueError("path loss exponent must be positive")

    def mean_rx_power(self, d, los=True):
        d = np.maximum(np.asarray(d, dtype=float), 1e-300)
        p = self.tx_power_dbm - self.ref_loss_db - 10.0 * self.pathloss_exponent * np.log10(d)
        return p - np.where(los, 0.0, self.nlos_extra_loss_db)

    def fading_db(self, rng: np.random.Generator, los) -> np.ndarray:
        """Nakagami-m power gain (unit mean Gamma(m, 1/m)) in dB, one draw per link."""
        los = np.atleast_1d(los)
        m = np.where(los, self.nakagami_m_los, self.nakagami_m_nlos)
        return 10.0 * np.log10(rng.gamma(m, 1.0 / m))

    def delivered(self, d, los, rng: np.random.Generator) -> np.ndarray:
        d = np.atleast_1d(np.asarray(d, dtype=float))
        los = np.broadcast_to(np.asarray(los, dtype=bool), d.shape)
        power = self.mean_rx_power(d, los) + self.fading_db(rng, los)
        return (power >= self.rx_threshold_dbm) | (d == 0.0)


@dataclass(frozen=True)
class NetworkConfig:
    mode: str = "centralized"
    uplink_latency: float = 0.005
    downlink_latency: float = 0.005
    penetration: float = 1.0
    link: LinkModel = field(default_factory=LinkModel)
    buildings: tuple = ()

    def __post_init__(self):
        if self.mode not in ("centralized", "distributed"):
            raise ValueError(f"network mode must be centralized or distributed, got {self.mode!r}")
        if self.uplink_latency < 0 or self.downlink_latency < 0:
            raise ValueError("latencies must be >= 0")
        if not 0.0 <= self.penetration <= 1.0:
            raise ValueError("penetration must lie in [0, 1]")


def deliver_centralized(cfg: NetworkConfig, now: float, kind: str = "bsm") -> float:
    """Arrival time of a BSM at the detector or of an alert at its user."""
    if kind == "bsm":
        return now + cfg.uplink_latency
    if kind == "alert":
        return now + cfg.downlink_latency
    raise ValueError(f"unknown message kind {kind!r}")


def deliver_v2v(cfg: NetworkConfig, tx, rx, rng: np.random.Generator, boxes=None) -> bool:
    """One-hop broadcast reception of a message from ``tx`` at ``rx``.

    ``tx``/``rx`` expose ``equipped`` and ``position`` (a Vec2).
    """
    if not (tx.equipped and rx.equipped):
        return False
    a, b = tx.position, rx.position
    d = math.hypot(a.x - b.x, a.y - b.y)
    if d == 0.0:
        return True
    if boxes is None:
        boxes = buildings_array(cfg.buildings)
    los = los_mask(np.array([[a.x, a.y]]), np.array([[b.x, b.y]]), boxes)
    return bool(cfg.link.delivered(np.array([d]), los, rng)[0])
