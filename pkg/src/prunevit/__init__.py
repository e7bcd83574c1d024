"""Desk-scale vision transformer kit with latency-aware soft token pruning."""

__version__ = "0.1.0"
