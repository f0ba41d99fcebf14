"""Monte Carlo and PDE laboratory for Ito processes with L_d-dominated drift."""

__version__ = "0.1.0"
