"""Alert-to-stop timeline: processing delay, human reaction and braking."""

from __future__ import annotations

from dataclasses import dataclass

from mecavoid.messages import EntityKind


@dataclass(frozen=True)
class ReactionProfile:
    processing_delay: float = 0.4
    human_reaction: float = 1.0
    decel: float = 4.5
    pedestrian_reaction: float = 1.0
    pedestrian_decel: float = 2.0

    def __post_init__(self):
        if min(self.processing_delay, self.human_reaction, self.pedestrian_reaction) < 0:
            raise ValueError("reaction delays must be >= 0")
        if self.decel <= 0 or self.pedestrian_decel <= 0:
            raise ValueError("decelerations must be positive")

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> ReactionProfile:
        """``human`` keeps the driver reaction time, ``autonomous`` drops it."""
        if mode == "autonomous":
            overrides["human_reaction"] = 0.0
        elif mode != "human":
            raise ValueError(f"reaction mode must be human or autonomous, got {mode!r}")
        return cls(**overrides)

    def delay(self, kind: EntityKind) -> float:
        if kind == EntityKind.PEDESTRIAN:
            return self.pedestrian_reaction
        return self.processing_delay + self.human_reaction

    def deceleration(self, kind: EntityKind) -> float:
        return self.pedestrian_decel if kind == EntityKind.PEDESTRIAN else self.decel


@dataclass
class BrakingSchedule:
    """One braking episode.  ``cause`` is the (sorted) pair whose alert triggered it."""

    brake_start: float
    initial_speed: float
    decel: float
    cause: tuple | None = None
    alert_arrival: float | None = None
    resumed_at: float | None = None

    def __post_init__(self):
        if self.decel <= 0:
            raise ValueError("decel must be positive")
        if self.initial_speed < 0:
            raise ValueError("initial_speed must be >= 0")

    @property
    def stop_time(self) -> float:
        return self.brake_start + self.initial_speed / self.decel

    def speed_at(self, t: float) -> float:
        if t <= self.brake_start:
            return self.initial_speed
        if t >= self.stop_time:
            return 0.0
        return max(0.0, self.initial_speed - self.decel * (t - self.brake_start))

    def distance_by(self, t: float) -> float:
        """Distance covered since brake_start, capped at the stopping distance."""
        tau = min(max(t - self.brake_start, 0.0), self.initial_speed / self.decel)
        return self.initial_speed * tau - 0.5 * self.decel * tau * tau


def stopping_distance(speed: float, decel: float) -> float:
    if decel <= 0:
        raise ValueError("decel must be positive")
    return speed * speed / (2.0 * decel)


def schedule_for(kind: EntityKind, speed: float, alert_arrival: float, profile: ReactionProfile,
                 cause=None) -> BrakingSchedule:
    """Braking episode an alert arriving at ``alert_arrival`` sets off for a road user of ``kind``."""
    return BrakingSchedule(alert_arrival + profile.delay(kind), speed, profile.deceleration(kind),
                           cause=cause, alert_arrival=alert_arrival)


def on_alert(entity, alert_arrival: float, profile: ReactionProfile, cause=None) -> BrakingSchedule | None:
    """Braking episode for an alert reaching ``entity``, or None if it is already responding.

    ``entity`` needs ``kind``, ``max_speed`` and ``braking`` (the pending or
    active schedule; ``None`` when cruising).
    """
    if entity.braking is not None:
        return None
    sched = schedule_for(entity.kind, entity.max_speed, alert_arrival, profile, cause)
    entity.braking = sched
    return sched
