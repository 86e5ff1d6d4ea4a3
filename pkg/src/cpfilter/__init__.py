"""Unscented-family filters with conformal outlier gating and fingerprint localization."""

__version__ = "0.1.0"
