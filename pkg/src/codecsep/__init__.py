"""Speech separation in the latent space of a small neural audio codec."""

__version__ = "0.1.0"
