"""Shared exception types."""


class ConfigurationError(ValueError):
    """Invalid or mismatched configuration (STFT setup, checkpoint binding, ...)."""
