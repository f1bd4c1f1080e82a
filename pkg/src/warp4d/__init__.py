"""Toolkit for the numerical core of a warp-then-inpaint 4D world model."""

__version__ = "0.1.0"
