"""Secondary-crash likelihood prediction from speed contours and dynamic windows."""

__version__ = "0.1.0"
