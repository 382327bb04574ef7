"""Stability and reference-based evaluation of CNN saliency explainers."""

__version__ = "0.1.0"
