"""Local-search GFlowNet training on string-building MDPs."""

__version__ = "0.1.0"
