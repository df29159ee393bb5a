"""Simulated DRAM-decay temperature side channel: decay model, enrollment,
temperature inference, spy harness and countermeasures."""

__version__ = "0.1.0"
