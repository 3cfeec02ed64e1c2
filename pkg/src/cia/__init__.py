"""Centered Initial Attack: bound-by-construction adversarial examples."""

__version__ = "0.1.0"
