"""Deterministic simulator for federated contrastive pretraining protocols."""

__version__ = "0.1.0"
