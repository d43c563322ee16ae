"""RE-Adapt toolkit - checkpoint arithmetic, low-rank adapters and QA evaluation."""

__version__ = "0.1.0"
