"""Recursive keypoint estimator with uncertainty-gated dynamic exits."""

__version__ = "0.1.0"
