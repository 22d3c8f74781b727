"""Forecasting cyber incident days from public chat-group activity."""

__version__ = "0.1.0"
