"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage errors are handled by argparse
itself (exit 2), InputError/CheckpointError surface as IO failures (exit 3),
NumericalAbort as a numerical failure (exit 4).
"""


class ShapeMismatch(ValueError):
    """Operands have incompatible shapes; message names both."""


class ContractViolation(RuntimeError):
    """An operation was called outside its stated contract."""


class ConfigurationError(ValueError):
    """A config value is out of its legal range or inconsistent."""


class InputError(ValueError):
    """Bad runtime input: unknown label, empty split, malformed file."""


class CheckpointError(IOError):
    """Checkpoint container is unreadable or structurally invalid."""


class NumericalAbort(RuntimeError):
    """Training hit a non-finite loss; carries the offending batch id."""

    def __init__(self, message: str, batch_id: int | None = None):
        super().__init__(message)
        self.batch_id = batch_id
