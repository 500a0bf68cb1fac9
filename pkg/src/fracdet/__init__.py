"""Dual-focus attention and multi-scale calibration blocks on a small numpy autodiff core."""

__version__ = "0.1.0"
