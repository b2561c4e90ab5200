"""Targeted psychoacoustically-gated PGD attacks on toy speech-enhancement models."""

__version__ = "0.1.0"
