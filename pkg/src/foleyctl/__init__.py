"""Envelope-controlled sound synthesis toolkit."""

__version__ = "0.1.0"
