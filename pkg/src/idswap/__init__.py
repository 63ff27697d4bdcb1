"""Identity-constrained diffusion face swapping on synthetic faces."""

__version__ = "0.1.0"
