"""Polarization three-state decoy QKD simulator and finite-key toolkit."""

__version__ = "0.1.0"
