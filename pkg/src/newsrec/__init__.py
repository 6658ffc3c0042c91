"""Session-based news recommendation with implicit feedback."""

__version__ = "0.1.0"
