"""Label-noise robust multi-domain image-to-image translation."""

__version__ = "0.1.0"
