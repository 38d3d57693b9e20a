class ConfigError(ValueError):
    """Invalid configuration or shape contract."""


class DatasetError(ValueError):
    """Dataset file or record failed validation."""


class DivergenceError(RuntimeError):
    """A non-finite loss or gradient surfaced during training."""
