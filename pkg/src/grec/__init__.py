"""Instruction-following generative recommendation over semantic IDs, at desk scale."""

__version__ = "0.1.0"
