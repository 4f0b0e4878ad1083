"""Simulation and verification toolkit for 1-D Brownian hard-rod systems."""

from . import cli, functionals, maps, measures, pde, potentials, simulate

__all__ = ["measures", "maps", "potentials", "simulate", "pde", "functionals", "cli"]
__version__ = "0.1.0"
