"""Pulse-level simulator and gate compiler for hybrid spin-photon qubit arrays."""

__version__ = "0.1.0"
