"""Desk-scale laboratory for embedding-perturbed exploration in
reward-based fine-tuning of flow-matching models."""

__version__ = "0.1.0"
