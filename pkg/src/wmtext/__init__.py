"""Keyed text watermarking, detection and radioactivity tests over Markov language models."""

__version__ = "0.1.0"
