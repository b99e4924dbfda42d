"""Multi-stream detection of facial reenactment in video frames."""

__version__ = "0.1.0"
