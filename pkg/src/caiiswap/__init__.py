"""Face identity swapping with cross-adaptive identity injection and
caption-gated CLIP supervision."""

__version__ = "0.1.0"
