"""Deterministic simulator of a smartphone-hosted eID: secure element, TEE, remote actors, adversary."""

from .config import ScenarioConfig, default_config, load_config
from .host import AbortAtStep, UntrustedStore, run_authentication, run_initialization
from .world import World

__all__ = [
    "AbortAtStep", "ScenarioConfig", "UntrustedStore", "World",
    "default_config", "load_config", "run_authentication", "run_initialization",
]
