"""Personalized federated learning via heterogeneous model reassembly."""

__version__ = "0.1.0"
