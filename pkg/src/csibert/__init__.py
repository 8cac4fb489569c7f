"""Recovery of lost Wi-Fi CSI frames with a masked bidirectional transformer."""

__version__ = "0.1.0"
