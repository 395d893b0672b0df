"""OUR-Net cascade with a population-prior machine for attenuation-map generation."""

__version__ = "0.1.0"
