"""Switched-mode converter topology synthesis toolkit."""

__version__ = "0.1.0"
