"""Linear-Gaussian UDA analysis, desk-scale UDA trainers and poisoning attacks."""

__version__ = "0.1.0"
