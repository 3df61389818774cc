"""Discrete token representations of accelerometer data via VQ-CPC, with SAX baselines."""

__version__ = "0.1.0"
