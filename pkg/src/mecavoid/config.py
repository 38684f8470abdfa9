"""Scenario configuration: INI files with one section per subsystem."""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

from mecavoid.beaconing import BeaconPolicy
from mecavoid.detector import DetectorConfig
from mecavoid.mobility import MobilityParams
from mecavoid.network import LinkModel
from mecavoid.reaction import ReactionProfile

DATA_DIR = Path(__file__).parent / "data"
CONFIG_DIR = DATA_DIR / "configs"


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class BeaconingSettings:
    min_interval: float = 0.1
    max_interval: float = 1.0
    pos_delta: float = 4.0
    speed_delta: float = 0.5
    heading_delta_deg: float = 4.0
    pedestrian_rate_hz: float = 1.0


@dataclass(frozen=True)
class ReactionSettings:
    mode: str = "human"
    scope: str = "pair"
    processing_delay: float = 0.4
    human_reaction: float = 1.0
    decel: float = 4.5
    pedestrian_reaction: float = 1.0
    pedestrian_decel: float = 2.0


@dataclass(frozen=True)
class NetworkSettings:
    uplink_latency: float = 0.005
    downlink_latency: float = 0.005
    pedestrian_v2v: bool = False


@dataclass(frozen=True)
class MetricsSettings:
    load_window: float = 1.0
    warmup_s: float = 100.0


@dataclass(frozen=True)
class MobilitySettings(MobilityParams):
    vehicle_rate: float | None = None
    pedestrian_rate: float | None = None

    def params(self) -> MobilityParams:
        names = [f.name for f in dataclasses.fields(MobilityParams)]
        return MobilityParams(**{n: getattr(self, n) for n in names})


@dataclass(frozen=True)
class ScenarioConfig:
    duration_s: float = 600.0
    master_seed: int = 1
    topology: str = "default"
    buildings: str = "none"
    mode: str = "centralized"
    penetration: float = 1.0
    beaconing: str = "dynamic"
    ground_truth: str = "pairwise"
    output_dir: str = "out"
    base_dir: str = "."
    mobility: MobilitySettings = field(default_factory=MobilitySettings)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    beaconing_params: BeaconingSettings = field(default_factory=BeaconingSettings)
    reaction: ReactionSettings = field(default_factory=ReactionSettings)
    network: NetworkSettings = field(default_factory=NetworkSettings)
    link: LinkModel = field(default_factory=LinkModel)
    metrics: MetricsSettings = field(default_factory=MetricsSettings)

    # -- derived ---------------------------------------------------------
    def topology_path(self) -> Path:
        return _resolve(self.topology, self.base_dir, DATA_DIR / "default.topo")

    def buildings_path(self) -> Path | None:
        if self.buildings.strip().lower() in ("", "none"):
            return None
        return _resolve(self.buildings, self.base_dir, DATA_DIR / "buildings.csv")

    def vehicle_policy(self) -> BeaconPolicy:
        b = self.beaconing_params
        return BeaconPolicy.parse(self.beaconing, min_interval=b.min_interval, max_interval=b.max_interval,
                                  pos_delta=b.pos_delta, speed_delta=b.speed_delta,
                                  heading_delta=math.radians(b.heading_delta_deg))

    def pedestrian_policy(self) -> BeaconPolicy:
        return BeaconPolicy.fixed(self.beaconing_params.pedestrian_rate_hz)

    def reaction_profile(self) -> ReactionProfile:
        r = self.reaction
        return ReactionProfile.for_mode(r.mode, processing_delay=r.processing_delay,
                                        human_reaction=r.human_reaction, decel=r.decel,
                                        pedestrian_reaction=r.pedestrian_reaction,
                                        pedestrian_decel=r.pedestrian_decel)

    def validate(self) -> ScenarioConfig:
        if not (math.isfinite(self.duration_s) and self.duration_s >= 0):
            raise ConfigError("scenario.duration_s", "must be a finite number >= 0")
        if self.mode not in ("centralized", "distributed"):
            raise ConfigError("scenario.mode", f"must be centralized or distributed, got {self.mode!r}")
        if not 0.0 <= self.penetration <= 1.0:
            raise ConfigError("scenario.penetration", "must lie in [0, 1]")
        if self.ground_truth not in ("pairwise", "global"):
            raise ConfigError("scenario.ground_truth", "must be pairwise or global")
        try:
            self.vehicle_policy()
            self.pedestrian_policy()
        except ValueError as exc:
            raise ConfigError("scenario.beaconing", str(exc)) from None
        try:
            self.reaction_profile()
        except ValueError as exc:
            raise ConfigError("reaction.mode", str(exc)) from None
        if self.reaction.scope not in ("pair", "live"):
            raise ConfigError("reaction.scope", f"must be pair or live, got {self.reaction.scope!r}")
        for key in ("vehicle_rate", "pedestrian_rate"):
            v = getattr(self.mobility, key)
            if v is not None and not v >= 0:
                raise ConfigError(f"mobility.{key}", "rates must be >= 0")
        n = self.network
        if n.uplink_latency < 0 or n.downlink_latency < 0:
            raise ConfigError("network.uplink_latency", "latencies must be >= 0")
        if not self.topology_path().is_file():
            raise ConfigError("scenario.topology", f"file not found: {self.topology_path()}")
        bp = self.buildings_path()
        if bp is not None and not bp.is_file():
            raise ConfigError("scenario.buildings", f"file not found: {bp}")
        return self

    def with_overrides(self, **kw) -> ScenarioConfig:
        kw = {k: v for k, v in kw.items() if v is not None}
        return dataclasses.replace(self, **kw).validate()

    # -- (de)serialisation ----------------------------------------------
    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                out[SECTION_OF.get(f.name, f.name)] = dataclasses.asdict(v)
            elif f.name != "base_dir":
                out.setdefault("scenario", {})[f.name] = v
        return out

    def to_ini(self) -> str:
        return _ini_text(self.to_dict())

    @classmethod
    def from_string(cls, text: str, base_dir=".") -> ScenarioConfig:
        cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError("file", str(exc)) from None
        known = {"scenario"} | set(SECTION_OF.values())
        for section in cp.sections():
            if section not in known:
                raise ConfigError(section, "unknown section")
        top = {}
        if cp.has_section("scenario"):
            top = _section(cp, "scenario", cls, skip=set(SECTION_OF) | {"base_dir"})
        nested = {}
        for attr, section in SECTION_OF.items():
            typ = _FIELD_TYPES[attr]
            try:
                nested[attr] = typ(**_section(cp, section, typ)) if cp.has_section(section) else typ()
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(section, str(exc)) from None
        try:
            cfg = cls(base_dir=str(base_dir), **top, **nested)
        except ValueError as exc:
            raise ConfigError("config", str(exc)) from None
        return cfg.validate()

    @classmethod
    def from_dict(cls, data: dict, base_dir=".") -> ScenarioConfig:
        """Inverse of ``to_dict``; accepts the config echo stored in a report."""
        return cls.from_string(_ini_text(data), base_dir=base_dir)

    @classmethod
    def from_file(cls, path) -> ScenarioConfig:
        p = Path(path)
        if not p.is_file():
            alt = CONFIG_DIR / (p.name if p.suffix else p.name + ".cfg")
            if alt.is_file():
                p = alt
            else:
                raise ConfigError("config", f"file not found: {path}")
        return cls.from_string(p.read_text(), base_dir=p.parent)


SECTION_OF = {"mobility": "mobility", "detector": "detector", "beaconing_params": "beaconing",
              "reaction": "reaction", "network": "network", "link": "link", "metrics": "metrics"}
_FIELD_TYPES = {"mobility": MobilitySettings, "detector": DetectorConfig,
                "beaconing_params": BeaconingSettings, "reaction": ReactionSettings,
                "network": NetworkSettings, "link": LinkModel, "metrics": MetricsSettings}


def _ini_text(data: dict) -> str:
    lines = []
    for section, values in data.items():
        lines.append(f"[{section}]")
        lines += [f"{k} = {'' if v is None else _fmt(v)}" for k, v in values.items()]
        lines.append("")
    return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _resolve(value: str, base_dir: str, default: Path) -> Path:
    if value.strip().lower() == "default":
        return default
    p = Path(value)
    if not p.is_absolute():
        cand = Path(base_dir) / p
        p = cand if cand.exists() or not (DATA_DIR / p).exists() else DATA_DIR / p
    return p


def _convert(key: str, raw: str, ftype):
    t = str(ftype)
    raw = raw.strip()
    try:
        if "None" in t and raw.lower() in ("", "none"):
            return None
        if "bool" in t:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if "int" in t and "float" not in t:
            return int(raw)
        if "float" in t:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(key, str(exc)) from None


def _section(cp, section: str, typ, skip=frozenset()) -> dict:
    fields = {f.name: f.type for f in dataclasses.fields(typ) if f.name not in skip}
    out = {}
    for key, raw in cp.items(section):
        if key not in fields:
            raise ConfigError(f"{section}.{key}", "unknown key")
        out[key] = _convert(f"{section}.{key}", raw, fields[key])
    return out


def canonical_configs() -> dict[str, Path]:
    return {p.stem: p for p in sorted(CONFIG_DIR.glob("*.cfg"))}
