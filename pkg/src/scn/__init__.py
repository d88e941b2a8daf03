"""Spatial context networks: two-stream patch encoders trained to predict the
features of a spatially offset patch from a context patch and its offset."""

__version__ = "0.1.0"
