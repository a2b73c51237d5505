"""Adaptive level sampling, mutual-information diagnostics and VAE-driven
environment design for a partially observable gridworld."""

__version__ = "0.1.0"
