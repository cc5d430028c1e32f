"""Simulation and analysis toolkit for dynamically rephased ORCA quantum memories."""

__version__ = "0.1.0"
