"""Residual slice imputation for stacks of coronal slab photographs."""

__version__ = "0.1.0"
