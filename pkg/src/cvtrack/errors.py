"""Exception taxonomy, mapped to CLI exit codes in cli.py."""


class ConfigError(ValueError):
    """Bad configuration or usage (exit code 1)."""


class DataError(ValueError):
    """Missing or malformed data files (exit code 2)."""


class GenerationError(RuntimeError):
    """Scene generation could not satisfy its constraints (exit code 2)."""


class CheckpointError(ValueError):
    """Checkpoint missing, malformed, or incompatible (exit code 2)."""


class CapacityError(ValueError):
    """More ground-truth objects than detection slots (exit code 1)."""


class NumericalAbort(RuntimeError):
    """Non-finite loss or gradient encountered (exit code 3)."""
