"""Two-modality (RGB + thermal) tracking-by-detection network with shared,
modality-specific and instance adapters, written from scratch in numpy."""

__version__ = "0.1.0"
