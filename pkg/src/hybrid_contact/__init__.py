"""Factor-graph smoothing for legged robots with hybrid preintegrated contact factors."""

__version__ = "0.1.0"
