"""Evaluation toolkit for explainable object detection."""

__version__ = "0.1.0"
