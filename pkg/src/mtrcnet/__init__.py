"""Joint tool-presence detection and surgical-phase recognition with a correlation loss."""

__version__ = "0.1.0"
