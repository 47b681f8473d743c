"""Federated recommendation with universal text-derived item representations."""

__version__ = "0.1.0"
