class ConfigError(ValueError):
    """Invalid configuration or input data; the CLI maps it to exit code 2."""
