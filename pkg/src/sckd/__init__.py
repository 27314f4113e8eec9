"""Selective correlation knowledge distillation for insole-to-GRF regression."""

__version__ = "0.1.0"
