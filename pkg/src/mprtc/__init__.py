"""Deterministic network simulator and multipath real-time transport stack."""

__version__ = "0.1.0"
