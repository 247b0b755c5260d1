"""Continuous-time, event-driven actor-critic RL for intensity control."""

__version__ = "0.1.0"
