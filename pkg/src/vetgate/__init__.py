"""vetgate: node vetting, early abort, and GPU saturation scoring."""

__version__ = "0.1.0"
