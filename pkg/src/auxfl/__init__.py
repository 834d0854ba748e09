"""Federated auxiliary-task multi-task learning simulator."""

__version__ = "0.1.0"
