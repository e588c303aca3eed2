"""Articulated-bicycle 8D pose toolkit: kinematics, synthetic data, fitting and metrics."""

__version__ = "0.1.0"
