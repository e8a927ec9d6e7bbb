"""Adversarial hyperspectral patch classifier with adaptive DropBlock, on a numpy autodiff core."""

__version__ = "0.1.0"
