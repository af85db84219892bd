"""MC-dropout uncertainty measures for adversarial and off-manifold input detection."""

__version__ = "0.1.0"
