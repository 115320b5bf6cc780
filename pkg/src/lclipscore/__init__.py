"""Lightweight dual-encoder caption metric: compression, distillation, scoring and SCST training."""

__version__ = "0.1.0"
