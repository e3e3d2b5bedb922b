"""Desk-scale zero-shot multi-task TTS with source-filter decomposition."""

__version__ = "0.1.0"
