"""Shaft-power-informed health estimation and FDI for an all-electric APU gas generator."""

__version__ = "0.1.0"
