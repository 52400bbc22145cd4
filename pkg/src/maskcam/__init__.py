"""Digital twin of a programmable-mask lensless camera."""

__version__ = "0.1.0"
