"""Exception types shared across the package."""


class UnknownWidthError(ValueError):
    """A width was requested that is not registered in the WidthConfig."""


class IllConditionedError(ValueError):
    """A Gram matrix exceeded the configured condition-number bound."""

    def __init__(self, what: str, cond: float, limit: float):
        self.cond = cond
        self.limit = limit
        super().__init__(f"{what} is ill-conditioned: cond={cond:.3e} > limit={limit:.3e}")


class ConfigError(ValueError):
    """A run-config file is malformed, has unknown keys, or fails validation."""
