"""Dynamic pattern recalibration forecasting engine."""

__version__ = "0.1.0"
