"""Discriminator-based adversarial input purification on a small numpy autodiff engine."""

__version__ = "0.1.0"
