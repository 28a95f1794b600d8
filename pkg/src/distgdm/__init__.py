"""Split-chain latent diffusion simulator with QoE-driven resource allocation."""

__version__ = "0.1.0"
