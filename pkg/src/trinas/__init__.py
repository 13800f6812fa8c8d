"""Hierarchical search-space screening and end-to-end differentiable search
for small object detectors, built on a numpy autodiff core."""

__version__ = "0.1.0"
