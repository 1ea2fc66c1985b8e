"""
CLI package for running LOFT adapter experiments
"""
from .main import VERSION as __version__, main

__all__ = ["main", "__version__"]
