"""Prompt-based class-agnostic counting with fixed-point refinement."""

__version__ = "0.1.0"
