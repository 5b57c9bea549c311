"""Continuous-depth residual networks as integro-differential control systems."""
__version__ = "0.1.0"
