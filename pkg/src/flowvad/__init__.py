"""Hybrid video anomaly detection: memory-augmented flow reconstruction + flow-guided frame prediction."""

__version__ = "0.1.0"
