"""Exception types shared across modules."""


class ConfigError(ValueError):
    """Invalid or missing configuration (bad values, missing files, missing credentials)."""
