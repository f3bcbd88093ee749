"""Desk-scale multilingual translation lab: a numpy transformer with language-specific
encoder biasing and decoder contrastive learning, plus representation analysis tools."""

__version__ = "0.1.0"
