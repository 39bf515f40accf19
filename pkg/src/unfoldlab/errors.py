"""Exception types shared across the package."""


class UnfoldError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(UnfoldError, ValueError):
    """Operand shapes are incompatible with an operation's contract."""


class DomainError(UnfoldError, ValueError):
    """A numeric argument lies outside its admissible domain."""


class ContractError(UnfoldError, ValueError):
    """An API precondition unrelated to shapes or domains was violated."""


class SingularMatrixError(UnfoldError, ArithmeticError):
    """A linear solve was rejected because the system is near-singular.

    Carries the condition-number estimate that triggered the rejection.
    """

    def __init__(self, cond: float, what: str = "matrix"):
        self.cond = float(cond)
        super().__init__(f"{what} is numerically singular (cond estimate {cond:.3e})")


class DivergenceError(UnfoldError, ArithmeticError):
    """A solver or model produced a non-finite value."""

    def __init__(self, where: str, iteration: int | None = None):
        self.where = where
        self.iteration = iteration
        msg = f"non-finite value in {where}"
        if iteration is not None:
            msg += f" at iteration {iteration}"
        super().__init__(msg)


class TuningError(UnfoldError, RuntimeError):
    """Every candidate in a tuning grid diverged."""


class TrainingError(UnfoldError, RuntimeError):
    """Training diverged; carries the stage/epoch where it happened."""

    def __init__(self, msg: str, stage: int | None = None, epoch: int | None = None):
        self.stage = stage
        self.epoch = epoch
        super().__init__(msg)


class FormatError(UnfoldError, ValueError):
    """A persisted file is malformed; carries the offending byte offset."""

    def __init__(self, msg: str, offset: int):
        self.offset = int(offset)
        super().__init__(f"{msg} (byte offset {offset})")


class VersionError(UnfoldError, ValueError):
    """A persisted file has an unsupported format version."""


class ConfigError(UnfoldError, ValueError):
    """An experiment configuration is malformed or inconsistent."""
