"""Grid Sense: distributed frequency emergency control simulator."""

__version__ = "0.1.0"
