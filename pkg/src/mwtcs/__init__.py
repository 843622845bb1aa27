"""Microwave tomography with sparse-coding priors."""

__version__ = "0.1.0"
