"""findkit: one image-text model for referring expressions, text-based
localization, and detection, at a scale that trains on a laptop CPU."""

__version__ = "0.1.0"
