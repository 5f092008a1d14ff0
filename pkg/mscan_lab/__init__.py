"""
Multi-scenario click-through-rate modelling with M-scan.

A scenario-aware CTR model that separates a user's interest from the bias a
scenario adds to clicks, trained and evaluated on logged or synthetic data.
"""

from .errors import MScanError
from .model import MScanModel

__version__ = "0.3.0"

__all__ = ['MScanError', 'MScanModel', '__version__']
