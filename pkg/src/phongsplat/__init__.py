"""Relightable Gaussian splatting for one-light-at-a-time point-light captures."""

__version__ = "0.1.0"
