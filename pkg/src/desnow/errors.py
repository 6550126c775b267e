class InvalidInputError(ValueError):
    """Raised when a tensor or argument violates an operation's preconditions."""


class ConfigurationError(RuntimeError):
    """Raised for unusable configuration: missing checkpoints, unknown keys, broken extractors."""


class TrainingDivergedError(RuntimeError):
    """Raised when a training step produces a non-finite loss."""
