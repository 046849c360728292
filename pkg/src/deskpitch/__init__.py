"""Desk-scale multi-speaker FastPitch with anonymous synthesis and speaker adaptation."""

__version__ = "0.1.0"
