"""Population treatment effects on treated compliers from RCT plus observational data."""

__version__ = "0.1.0"
