"""Minimal numpy-backed tensors with reverse-mode autodiff and quantizer nodes."""

from daq.autodiff.tensor import ShapeError, TapeNode, Tensor, backward

__all__ = ["ShapeError", "TapeNode", "Tensor", "backward"]
