"""QR-recursive compressed volume integral equation solver for meta-atom arrays."""

__version__ = "0.1.0"
