"""Desk-scale referring video object segmentation.

A candidate-query transformer with a stacked (per-candidate) mask decoder,
Hungarian set-matching losses with a kernel diversity regularizer, and the
standard RVOS metric suite, all built on a small float64 autodiff core.
"""

from .tensor import Tensor, ShapeError, backward, grad_check

__all__ = ["Tensor", "ShapeError", "backward", "grad_check"]
