"""Prototype-guided distributionally robust learning under distribution shift."""

__version__ = "0.1.0"
