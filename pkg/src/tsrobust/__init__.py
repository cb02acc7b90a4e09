"""Robust time-series forecasting with negative-sample pretraining,
positive-sample repair and a sharpness-aware adversarial optimizer."""

__version__ = "0.1.0"
