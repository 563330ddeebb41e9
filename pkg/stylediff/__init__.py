"""Text-conditioned motion diffusion with LoRA style adaptation."""

__version__ = "0.1.0"
