"""Pose-dependent adversarial patches against a grid object detector, on synthetic driving scenes."""

__version__ = "0.1.0"
