"""Cooperative multi-agent traffic-signal control on a queue-based grid simulator."""
from __future__ import annotations

from .netmodel import TrafficNetwork, build_grid_network, neighbors_of
from .flows import FlowSpec, TripRecord, generate_flows, load_flows, save_flows
from .simcore import SimParams, SimState, TrafficMetrics, reset, step
from .env import GridTrafficEnv
from .advantage import MODES, AdvantageConfig, variant_advantages
from .config import ConfigError, load_config, resolve
from .trainer import evaluate, train

__version__ = "0.1.0"

__all__ = [
    "TrafficNetwork", "build_grid_network", "neighbors_of",
    "FlowSpec", "TripRecord", "generate_flows", "load_flows", "save_flows",
    "SimParams", "SimState", "TrafficMetrics", "reset", "step",
    "GridTrafficEnv", "MODES", "AdvantageConfig", "variant_advantages",
    "ConfigError", "load_config", "resolve", "evaluate", "train",
]
