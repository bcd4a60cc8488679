"""Exception types shared across the package."""


class NumericalError(RuntimeError):
    """A covariance or innovation matrix became singular or ill-conditioned.

    Raised by the filter, smoother and EM loop; carries enough context
    (step or iteration index) to locate the failing window.
    """


class ConfigError(ValueError):
    """An experiment configuration failed validation."""
