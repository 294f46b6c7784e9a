"""Exception types shared across fsrkit."""


class ConfigurationError(ValueError):
    """Raised when a model, module or experiment is configured inconsistently."""


class DomainError(ValueError):
    """Raised when a numeric argument falls outside the domain of an operation."""


class FormatError(ValueError):
    """Raised when an on-disk file does not match its expected binary layout."""


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes non-finite.

    ``diagnostics`` carries summary statistics of the last batch.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
