"""Single-ended objective quality estimation for time-scale modified audio."""

__version__ = "0.1.0"
