"""Deterministic permissioned-blockchain simulator with a digital-twin
feedback loop that picks the consensus protocol for each time step."""

__version__ = "0.1.0"
