"""Collision-avoidance simulator comparing an edge-hosted detector with V2V detection."""

from mecavoid.config import ScenarioConfig, canonical_configs
from mecavoid.engine import run

__version__ = "0.1.0"
__all__ = ["ScenarioConfig", "canonical_configs", "run", "__version__"]
