"""Representation uncertainty on frozen embeddings: loss-prediction heads and LA@1 evaluation."""

__version__ = "0.1.0"
