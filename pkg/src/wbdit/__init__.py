"""White-box diffusion transformer for expression-matrix generation."""

__version__ = "0.1.0"
