"""Block-based multi-agent navigation with learned per-block traffic rules."""

__version__ = "0.1.0"
