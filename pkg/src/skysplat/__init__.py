"""Unified aerial and street-view Gaussian splatting at desk scale."""
__version__ = "0.1.0"
