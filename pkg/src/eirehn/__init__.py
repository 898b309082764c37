"""Recurrent elastic highway networks with hypernetwork-generated weights."""

__version__ = "0.1.0"
