"""Frame-aware perception, tracking and prediction toolkit with a V2I trade-study harness."""

__version__ = "0.1.0"
