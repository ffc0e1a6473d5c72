"""Blockchain-coordinated voltage regulation for zonal distribution grids."""

__version__ = "0.1.0"
