"""Relic-landslide segmentation from optical and elevation rasters."""

__version__ = "0.1.0"
