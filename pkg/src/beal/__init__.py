"""Boundary- and entropy-driven adversarial domain adaptation for disc/cup segmentation."""

__version__ = "0.1.0"
