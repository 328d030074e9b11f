"""Multimodal conditional imitation learning for end-to-end driving."""

__version__ = "0.1.0"
