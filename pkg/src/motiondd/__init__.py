"""Text-conditioned motion generation with discrete diffusion over VQ motion tokens."""

__version__ = "0.1.0"
