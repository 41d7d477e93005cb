"""Cascaded open-set recognition: triplet embedding + prototype discriminator + closed-set classifier."""

__version__ = "0.1.0"
