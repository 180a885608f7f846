"""Exceptions shared across modules."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (bad keys, dims, credentials)."""
