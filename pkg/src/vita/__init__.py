"""Shared vision-action codebook world model on a synthetic manipulation benchmark."""

__version__ = "0.1.0"

from .tensor import Tensor  # noqa: F401
