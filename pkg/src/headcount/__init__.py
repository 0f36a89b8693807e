"""Wheat-head counting toolkit: density regression, localization, yield."""

__version__ = "0.1.0"
