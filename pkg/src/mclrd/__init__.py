"""Modality-collaborative low-rank decomposers for few-shot video domain adaptation."""

__version__ = "0.1.0"
