"""Simulation and inversion of wide-field NV ODMR stacks into strain maps."""

__version__ = "0.1.0"
