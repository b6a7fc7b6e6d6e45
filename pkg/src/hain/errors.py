"""Exception types shared across the package."""


class HainError(Exception):
    """Base class for all package errors."""


class ShapeError(HainError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(HainError, ValueError):
    """A precondition of an operation was violated."""


class EvaluationError(HainError, ArithmeticError):
    """A function produced a non-finite value."""


class TrainingError(HainError, RuntimeError):
    """Training diverged; ``epoch`` names where."""

    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class CapacityError(HainError, ValueError):
    """A request exceeds what an exact algorithm can enumerate."""


class MetricError(HainError, ValueError):
    """A metric is undefined for the given inputs."""


class FormatError(HainError, ValueError):
    """Malformed input file."""


class IntegrityError(HainError, ValueError):
    """A persisted artifact failed its length or checksum check."""


class IncompatibleVersionError(HainError, ValueError):
    """A persisted artifact has an unsupported format version."""
