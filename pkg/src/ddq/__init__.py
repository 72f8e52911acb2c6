"""Asynchronous parameter-server deep Q-learning with a numpy Q-network."""

__version__ = "0.1.0"
