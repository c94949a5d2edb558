"""Conditional empirical measures of killed diffusions."""
__version__ = "0.1.0"
