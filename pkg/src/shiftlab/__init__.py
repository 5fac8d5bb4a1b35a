"""Learning under distribution shift with importance weights."""

__version__ = "0.1.0"
