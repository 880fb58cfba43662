"""Adaptive conformal risk control with learned per-input thresholds."""

__version__ = "0.1.0"
