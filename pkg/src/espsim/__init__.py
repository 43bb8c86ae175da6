"""Cycle-level simulator of a tile-based heterogeneous SoC."""

from .config import (CoherenceMode, ConfigError, ConfigParseError, MessageClass, SocConfig,
                     ValidatedSoC, load_config, parse_config, plane_for_message, validate_config)
from .engine import DeadlockSuspected, Simulator, Stats, TraceSink, simulate

__all__ = ["CoherenceMode", "ConfigError", "ConfigParseError", "MessageClass", "SocConfig",
           "ValidatedSoC", "load_config", "parse_config", "plane_for_message",
           "validate_config", "DeadlockSuspected", "Simulator", "Stats", "TraceSink", "simulate"]
__version__ = "0.1.0"
