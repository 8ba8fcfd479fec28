"""Hierarchical emergence detection on agent-based simulations."""

__version__ = "0.1.0"
