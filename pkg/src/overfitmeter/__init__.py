"""Measure classifier overfitting from accuracy curves under controlled perturbations."""

__version__ = "0.1.0"
