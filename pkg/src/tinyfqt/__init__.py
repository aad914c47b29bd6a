"""8-bit fully quantized training engine for small CNNs."""

__version__ = "0.1.0"
