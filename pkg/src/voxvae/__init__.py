"""Variational voxelwise representation learning for 4D volumetric time series."""

__version__ = "0.1.0"
