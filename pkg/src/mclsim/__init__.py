"""Two-phase flow with moving contact lines: a linear, decoupled, energy-stable finite element solver."""

__version__ = "0.1.0"
