"""Numpy-based autodiff, conv kernels, and layer primitives."""
