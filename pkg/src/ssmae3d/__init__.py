"""Linear-time selective state-space masked autoencoder for 3D volumes."""

__version__ = "0.1.0"
