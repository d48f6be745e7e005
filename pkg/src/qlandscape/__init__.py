"""Control-landscape analysis for finite-level quantum systems."""

__version__ = "0.1.0"
