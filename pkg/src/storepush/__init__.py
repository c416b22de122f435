"""Storage-function pushdown over a disaggregated block protocol."""

__version__ = "0.1.0"
