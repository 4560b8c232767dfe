"""Timing covert-channel simulator and assessment toolkit for cyclic partition schedulers."""

__version__ = "0.1.0"
