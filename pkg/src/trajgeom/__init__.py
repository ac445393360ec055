"""Length-aware trajectory geometry for sampled hidden-state archives."""

__version__ = "0.1.0"
