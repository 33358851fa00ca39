"""Adversarial perturbations against time-series anomaly detectors."""

__version__ = "0.1.0"
